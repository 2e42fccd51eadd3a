//! Logarithmic b-bit quantization of factor matrices.
//!
//! A block is normalized by its max-abs `scale`, each magnitude `t ∈ [0, 1]` is
//! mapped through `u = ln(1 + αt) / ln(1 + α)` and snapped to the nearest of
//! `L = 2^(b-1)` uniformly spaced levels `k / (L - 1)`. Every scalar costs
//! exactly `b` bits: one sign bit followed by `b - 1` magnitude bits.
//!
//! # Byte layout
//!
//! ```text
//! offset  size  field
//! 0       4     rows   u32 LE
//! 4       4     cols   u32 LE
//! 8       1     bits   u8
//! 9       8     alpha  f64 LE
//! 17      8     scale  f64 LE
//! 25      ..    codes  ceil(rows * cols * bits / 8) bytes
//! ```
//!
//! Codes are written in row-major entry order. Within an entry the sign bit
//! comes first, then the magnitude level most significant bit first. The bit
//! stream fills each byte from its most significant bit and the final byte is
//! zero padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Size of the fixed block header in bits (25 bytes).
pub const BLOCK_HEADER_BITS: u64 = 200;
pub const BLOCK_HEADER_BYTES: usize = 25;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u8,
    alpha: f64,
}

impl QuantConfig {
    pub fn new(bits: u8, alpha: f64) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Config(format!(
                "quantization bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self { bits, alpha })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of magnitude levels, `2^(b-1)`.
    pub fn levels(&self) -> u32 {
        1u32 << (self.bits - 1)
    }

    /// Spacing of the levels in the mapped domain, `1 / (L - 1)`.
    pub fn level_step(&self) -> f64 {
        1.0 / f64::from(self.levels() - 1)
    }

    /// Dequantized magnitude of every level for a unit scale.
    pub fn level_table(&self) -> Vec<f64> {
        let top = self.levels() - 1;
        (0..=top)
            .map(|k| match k {
                0 => 0.0,
                k if k == top => 1.0,
                k => log_unmap(f64::from(k) / f64::from(top), self.alpha),
            })
            .collect()
    }

    /// `((1 + α)^(Δ/2) - 1) / α`: the largest round-trip error at magnitude zero
    /// for a unit scale.
    pub fn half_bin_error(&self) -> f64 {
        log_unmap(self.level_step() / 2.0, self.alpha)
    }

    /// Largest round-trip error for an entry of normalized magnitude `t`, unit
    /// scale. The log mapping stretches bins near the top, so the bound grows
    /// linearly in `t` up to `(1 + α)` times the zero-magnitude value.
    pub fn round_trip_error_bound(&self, t: f64) -> f64 {
        self.half_bin_error() * (1.0 + self.alpha * t.abs())
    }
}

/// Continuous log mapping for a magnitude `t ≥ 0`.
pub fn log_map(t: f64, alpha: f64) -> f64 {
    (alpha * t).ln_1p() / alpha.ln_1p()
}

/// Inverse of [`log_map`].
pub fn log_unmap(u: f64, alpha: f64) -> f64 {
    (u * alpha.ln_1p()).exp_m1() / alpha
}

/// Signed continuous quantization `sign(x) · ln(1 + α|x|) / ln(1 + α)`.
pub fn log_quantize_value(x: f64, alpha: f64) -> f64 {
    log_map(x.abs(), alpha).copysign(x)
}

pub fn log_dequantize_value(q: f64, alpha: f64) -> f64 {
    log_unmap(q.abs(), alpha).copysign(q)
}

/// Payload and header bits of one serialized block, reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WireSize {
    pub payload_bits: u64,
    /// Header plus byte-alignment padding.
    pub metadata_bits: u64,
}

impl WireSize {
    pub fn total_bits(&self) -> u64 {
        self.payload_bits + self.metadata_bits
    }
}

impl std::ops::Add for WireSize {
    type Output = WireSize;

    fn add(self, rhs: WireSize) -> WireSize {
        WireSize {
            payload_bits: self.payload_bits + rhs.payload_bits,
            metadata_bits: self.metadata_bits + rhs.metadata_bits,
        }
    }
}

impl std::ops::AddAssign for WireSize {
    fn add_assign(&mut self, rhs: WireSize) {
        *self = *self + rhs;
    }
}

/// Wire cost of a `rows × cols` block at `bits` per scalar.
pub fn wire_size_bits(rows: usize, cols: usize, bits: u32) -> WireSize {
    let payload = rows as u64 * cols as u64 * u64::from(bits);
    let padding = (8 - payload % 8) % 8;
    WireSize { payload_bits: payload, metadata_bits: BLOCK_HEADER_BITS + padding }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    rows: usize,
    cols: usize,
    config: QuantConfig,
    scale: f64,
    codes: Vec<u8>,
}

fn code_bytes(rows: usize, cols: usize, bits: u8) -> usize {
    (rows * cols * usize::from(bits)).div_ceil(8)
}

impl QuantizedBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Raw code of entry `i`: sign bit in position `b - 1`, level below it.
    pub fn code(&self, i: usize) -> u32 {
        read_bits(&self.codes, i * usize::from(self.config.bits), self.config.bits)
    }

    pub fn wire_size(&self) -> WireSize {
        wire_size_bits(self.rows, self.cols, u32::from(self.config.bits))
    }

    pub fn encoded_len(&self) -> usize {
        BLOCK_HEADER_BYTES + self.codes.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(self.config.bits);
        out.extend_from_slice(&self.config.alpha.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.codes);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out);
        out
    }

    /// Parses one block from the front of `bytes`, returning it and the number
    /// of bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < BLOCK_HEADER_BYTES {
            return Err(Error::Format(format!(
                "quantized block header needs {BLOCK_HEADER_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let bits = bytes[8];
        let alpha = f64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let scale = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("bad block dims {rows}x{cols}")));
        }
        let config = QuantConfig::new(bits, alpha).map_err(|e| Error::Format(e.to_string()))?;
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Format(format!("bad block scale {scale}")));
        }
        let n = code_bytes(rows, cols, bits);
        let end = BLOCK_HEADER_BYTES + n;
        if bytes.len() < end {
            return Err(Error::Format(format!(
                "code stream truncated: need {n} bytes, have {}",
                bytes.len() - BLOCK_HEADER_BYTES
            )));
        }
        let block = Self { rows, cols, config, scale, codes: bytes[BLOCK_HEADER_BYTES..end].to_vec() };
        Ok((block, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (block, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after block", bytes.len() - used)));
        }
        Ok(block)
    }
}

fn write_bits(buf: &mut [u8], bit_offset: usize, width: u8, value: u32) {
    for i in 0..usize::from(width) {
        let bit = (value >> (usize::from(width) - 1 - i)) & 1;
        if bit == 1 {
            let pos = bit_offset + i;
            buf[pos / 8] |= 0x80 >> (pos % 8);
        }
    }
}

fn read_bits(buf: &[u8], bit_offset: usize, width: u8) -> u32 {
    let mut value = 0u32;
    for i in 0..usize::from(width) {
        let pos = bit_offset + i;
        let bit = (buf[pos / 8] >> (7 - pos % 8)) & 1;
        value = (value << 1) | u32::from(bit);
    }
    value
}

/// Quantizes a block with one max-abs scale.
pub fn log_quantize(m: &Matrix, cfg: QuantConfig) -> Result<QuantizedBlock> {
    if !m.is_finite() {
        return Err(Error::Data("cannot quantize non-finite values".into()));
    }
    let (rows, cols) = m.dims();
    let mut codes = vec![0u8; code_bytes(rows, cols, cfg.bits)];
    let scale = m.max_abs();
    if scale > 0.0 {
        let top = f64::from(cfg.levels() - 1);
        let sign_shift = cfg.bits - 1;
        for (i, &x) in m.data().iter().enumerate() {
            let t = x.abs() / scale;
            let u = log_map(t, cfg.alpha);
            // u >= 0, so floor(v + 0.5) rounds halves away from zero.
            let level = ((u * top + 0.5).floor()).min(top) as u32;
            let sign = u32::from(x.is_sign_negative());
            write_bits(&mut codes, i * usize::from(cfg.bits), cfg.bits, (sign << sign_shift) | level);
        }
    }
    Ok(QuantizedBlock { rows, cols, config: cfg, scale, codes })
}

pub fn log_dequantize(q: &QuantizedBlock) -> Result<Matrix> {
    let expected = code_bytes(q.rows, q.cols, q.config.bits);
    if q.codes.len() != expected {
        return Err(Error::Format(format!(
            "code stream has {} bytes, expected {expected}",
            q.codes.len()
        )));
    }
    let table = q.config.level_table();
    let sign_bit = 1u32 << (q.config.bits - 1);
    let mut out = Matrix::zeros(q.rows, q.cols);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let code = q.code(i);
        let level = (code & (sign_bit - 1)) as usize;
        let magnitude = q.scale * table[level];
        *v = if code & sign_bit != 0 { -magnitude } else { magnitude };
    }
    Ok(out)
}

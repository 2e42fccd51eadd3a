//! Wire form of everything a worker sends.
//!
//! ```text
//! tag  variant            body
//! 0    Dense              rows u32, cols u32, rows*cols values
//! 1    TopKSparse         rows u32, cols u32, count u32, count u32 indices, count values
//! 2    LowRankQuantized   factor P, factor Q (block layouts back to back)
//! 3    Factor             one factor block
//! ```
//!
//! All integers and floats are little-endian. Values are `f32` in the
//! canonical encoding, which is what the communication ledger charges. Setting
//! the high bit of the tag (`0x80`) selects `f64` values instead; the loopback
//! transport uses that form so both transports aggregate identical numbers.
//!
//! A factor block is a quantized block (see [`crate::quantizer`]) or, when its
//! `bits` header byte is 32, an unquantized factor: the same 25-byte header
//! with `alpha` and `scale` set to zero, followed by raw values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quantizer::{self, QuantizedBlock, WireSize, BLOCK_HEADER_BITS, BLOCK_HEADER_BYTES};

pub const TAG_DENSE: u8 = 0;
pub const TAG_TOPK: u8 = 1;
pub const TAG_LOW_RANK: u8 = 2;
pub const TAG_FACTOR: u8 = 3;
pub const WIDE_VALUES: u8 = 0x80;

pub const TAG_BITS: u64 = 8;
/// rows + cols.
pub const DENSE_HEADER_BITS: u64 = TAG_BITS + 64;
/// rows + cols + count.
pub const TOPK_HEADER_BITS: u64 = TAG_BITS + 96;
/// Accounting width of an unquantized scalar.
pub const FLOAT_BITS: u64 = 32;
/// Per-entry cost of a sparse pair: u32 index + f32 value.
pub const SPARSE_ENTRY_BITS: u64 = 64;

const FULL_FACTOR_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueWidth {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major flat indices, strictly increasing.
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        let n = self.rows * self.cols;
        if self.indices.len() != self.values.len() {
            return Err(Error::Format("sparse index/value count mismatch".into()));
        }
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            let i = i as usize;
            if i >= n {
                return Err(Error::Format(format!("sparse index {i} out of range for {n} entries")));
            }
            m.data_mut()[i] = v;
        }
        Ok(m)
    }
}

/// One low-rank factor as it travels on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FactorBlock {
    Quantized(QuantizedBlock),
    Full(Matrix),
}

impl FactorBlock {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            FactorBlock::Quantized(q) => q.dims(),
            FactorBlock::Full(m) => m.dims(),
        }
    }

    /// The values every receiver reconstructs.
    pub fn values(&self) -> Result<Matrix> {
        match self {
            FactorBlock::Quantized(q) => quantizer::log_dequantize(q),
            FactorBlock::Full(m) => Ok(m.clone()),
        }
    }

    pub fn wire_size(&self) -> WireSize {
        match self {
            FactorBlock::Quantized(q) => q.wire_size(),
            FactorBlock::Full(m) => quantizer::wire_size_bits(m.rows(), m.cols(), FULL_FACTOR_BITS.into()),
        }
    }

    fn write_to(&self, out: &mut Vec<u8>, width: ValueWidth) {
        match self {
            FactorBlock::Quantized(q) => q.write_to(out),
            FactorBlock::Full(m) => {
                out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                out.push(FULL_FACTOR_BITS);
                out.extend_from_slice(&0f64.to_le_bytes());
                out.extend_from_slice(&0f64.to_le_bytes());
                write_values(out, m.data(), width);
            }
        }
    }

    fn read_from(bytes: &[u8], width: ValueWidth) -> Result<(Self, usize)> {
        if bytes.len() < BLOCK_HEADER_BYTES {
            return Err(Error::Format("factor block header truncated".into()));
        }
        if bytes[8] != FULL_FACTOR_BITS {
            let (q, used) = QuantizedBlock::read_from(bytes)?;
            return Ok((FactorBlock::Quantized(q), used));
        }
        let rows = read_u32(bytes, 0)? as usize;
        let cols = read_u32(bytes, 4)? as usize;
        let (data, used) = read_values(&bytes[BLOCK_HEADER_BYTES..], rows * cols, width)?;
        let m = Matrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?;
        Ok((FactorBlock::Full(m), BLOCK_HEADER_BYTES + used))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompressedMessage {
    Dense(Matrix),
    TopKSparse(SparseMatrix),
    LowRankQuantized { p: FactorBlock, q: FactorBlock },
    /// A single factor, sent during one round of the low-rank protocol.
    Factor(FactorBlock),
}

impl CompressedMessage {
    pub fn variant_name(&self) -> &'static str {
        match self {
            CompressedMessage::Dense(_) => "dense",
            CompressedMessage::TopKSparse(_) => "topk",
            CompressedMessage::LowRankQuantized { .. } => "low_rank",
            CompressedMessage::Factor(_) => "factor",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            CompressedMessage::Dense(_) => TAG_DENSE,
            CompressedMessage::TopKSparse(_) => TAG_TOPK,
            CompressedMessage::LowRankQuantized { .. } => TAG_LOW_RANK,
            CompressedMessage::Factor(_) => TAG_FACTOR,
        }
    }

    /// Dimensions of the matrix this message reconstructs to.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            CompressedMessage::Dense(m) => m.dims(),
            CompressedMessage::TopKSparse(s) => (s.rows, s.cols),
            CompressedMessage::LowRankQuantized { p, q } => (p.dims().0, q.dims().0),
            CompressedMessage::Factor(f) => f.dims(),
        }
    }

    /// Dense reconstruction of the message content.
    pub fn reconstruct(&self) -> Result<Matrix> {
        match self {
            CompressedMessage::Dense(m) => Ok(m.clone()),
            CompressedMessage::TopKSparse(s) => s.to_dense(),
            CompressedMessage::LowRankQuantized { p, q } => {
                let p = p.values()?;
                let q = q.values()?;
                if p.cols() != q.cols() {
                    return Err(Error::Format(format!(
                        "factor ranks differ: {} vs {}",
                        p.cols(),
                        q.cols()
                    )));
                }
                p.matmul_t(&q)
            }
            CompressedMessage::Factor(f) => f.values(),
        }
    }

    /// Payload and metadata cost under the canonical encoding.
    pub fn wire_size(&self) -> WireSize {
        match self {
            CompressedMessage::Dense(m) => WireSize {
                payload_bits: m.len() as u64 * FLOAT_BITS,
                metadata_bits: DENSE_HEADER_BITS,
            },
            CompressedMessage::TopKSparse(s) => WireSize {
                payload_bits: s.indices.len() as u64 * SPARSE_ENTRY_BITS,
                metadata_bits: TOPK_HEADER_BITS,
            },
            CompressedMessage::LowRankQuantized { p, q } => {
                let mut w = p.wire_size() + q.wire_size();
                w.metadata_bits += TAG_BITS;
                w
            }
            CompressedMessage::Factor(f) => {
                let mut w = f.wire_size();
                w.metadata_bits += TAG_BITS;
                w
            }
        }
    }

    /// Canonical encoding.
    pub fn encode(&self) -> Vec<u8> {
        self.encode_with(ValueWidth::F32)
    }

    pub fn encode_with(&self, width: ValueWidth) -> Vec<u8> {
        let mut out = Vec::new();
        let wide = if width == ValueWidth::F64 { WIDE_VALUES } else { 0 };
        out.push(self.tag() | wide);
        match self {
            CompressedMessage::Dense(m) => {
                out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                write_values(&mut out, m.data(), width);
            }
            CompressedMessage::TopKSparse(s) => {
                out.extend_from_slice(&(s.rows as u32).to_le_bytes());
                out.extend_from_slice(&(s.cols as u32).to_le_bytes());
                out.extend_from_slice(&(s.indices.len() as u32).to_le_bytes());
                for i in &s.indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
                write_values(&mut out, &s.values, width);
            }
            CompressedMessage::LowRankQuantized { p, q } => {
                p.write_to(&mut out, width);
                q.write_to(&mut out, width);
            }
            CompressedMessage::Factor(f) => f.write_to(&mut out, width),
        }
        out
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let (&raw_tag, body) =
            bytes.split_first().ok_or_else(|| Error::Format("empty message".into()))?;
        let width = if raw_tag & WIDE_VALUES != 0 { ValueWidth::F64 } else { ValueWidth::F32 };
        let (msg, used) = match raw_tag & !WIDE_VALUES {
            TAG_DENSE => {
                let rows = read_u32(body, 0)? as usize;
                let cols = read_u32(body, 4)? as usize;
                let (data, used) = read_values(&body[8..], rows * cols, width)?;
                let m = Matrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?;
                (CompressedMessage::Dense(m), 8 + used)
            }
            TAG_TOPK => {
                let rows = read_u32(body, 0)? as usize;
                let cols = read_u32(body, 4)? as usize;
                let count = read_u32(body, 8)? as usize;
                let idx_end = 12 + 4 * count;
                let indices = (0..count)
                    .map(|i| read_u32(body, 12 + 4 * i))
                    .collect::<Result<Vec<_>>>()?;
                let (values, used) = read_values(&body[idx_end.min(body.len())..], count, width)?;
                let s = SparseMatrix { rows, cols, indices, values };
                if rows == 0 || cols == 0 {
                    return Err(Error::Format("sparse message with zero dims".into()));
                }
                if s.indices.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Format("sparse indices must be strictly increasing".into()));
                }
                s.to_dense()?;
                (CompressedMessage::TopKSparse(s), idx_end + used)
            }
            TAG_LOW_RANK => {
                let (p, a) = FactorBlock::read_from(body, width)?;
                let (q, b) = FactorBlock::read_from(&body[a..], width)?;
                (CompressedMessage::LowRankQuantized { p, q }, a + b)
            }
            TAG_FACTOR => {
                let (f, used) = FactorBlock::read_from(body, width)?;
                (CompressedMessage::Factor(f), used)
            }
            other => return Err(Error::Format(format!("unknown message tag {other}"))),
        };
        if used != body.len() {
            return Err(Error::Format(format!("{} trailing bytes in message", body.len() - used)));
        }
        Ok(msg)
    }
}

fn write_values(out: &mut Vec<u8>, values: &[f64], width: ValueWidth) {
    match width {
        ValueWidth::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        ValueWidth::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("message truncated".into()))
}

fn read_values(bytes: &[u8], count: usize, width: ValueWidth) -> Result<(Vec<f64>, usize)> {
    let size = match width {
        ValueWidth::F32 => 4,
        ValueWidth::F64 => 8,
    };
    let need = count * size;
    if bytes.len() < need {
        return Err(Error::Format(format!("need {need} value bytes, have {}", bytes.len())));
    }
    let values = bytes[..need]
        .chunks_exact(size)
        .map(|c| match width {
            ValueWidth::F32 => f64::from(f32::from_le_bytes(c.try_into().unwrap())),
            ValueWidth::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok((values, need))
}

/// Header bits of a factor block, used by the accounting tests.
pub const FACTOR_HEADER_BITS: u64 = BLOCK_HEADER_BITS;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{log_quantize, QuantConfig};
    use crate::rng::SeededRng;
    use crate::linalg::gaussian_matrix;

    fn low_rank(seed: u64) -> CompressedMessage {
        let mut rng = SeededRng::new(seed);
        let cfg = QuantConfig::new(8, 1.0).unwrap();
        CompressedMessage::LowRankQuantized {
            p: FactorBlock::Quantized(log_quantize(&gaussian_matrix(&mut rng, 6, 2), cfg).unwrap()),
            q: FactorBlock::Quantized(log_quantize(&gaussian_matrix(&mut rng, 5, 2), cfg).unwrap()),
        }
    }

    #[test]
    fn canonical_length_matches_wire_size() {
        let mut rng = SeededRng::new(3);
        let msgs = vec![
            CompressedMessage::Dense(gaussian_matrix(&mut rng, 3, 4)),
            CompressedMessage::TopKSparse(SparseMatrix {
                rows: 2,
                cols: 3,
                indices: vec![1, 4],
                values: vec![0.5, -2.0],
            }),
            low_rank(4),
            CompressedMessage::Factor(FactorBlock::Full(gaussian_matrix(&mut rng, 4, 1))),
        ];
        for m in msgs {
            assert_eq!(m.encode().len() as u64 * 8, m.wire_size().total_bits(), "{}", m.variant_name());
        }
    }

    #[test]
    fn wide_encoding_is_lossless() {
        let mut rng = SeededRng::new(9);
        let msgs = vec![
            CompressedMessage::Dense(gaussian_matrix(&mut rng, 3, 4)),
            CompressedMessage::TopKSparse(SparseMatrix {
                rows: 1,
                cols: 4,
                indices: vec![0, 3],
                values: vec![std::f64::consts::PI, -1e-300],
            }),
            low_rank(5),
            CompressedMessage::LowRankQuantized {
                p: FactorBlock::Full(gaussian_matrix(&mut rng, 4, 1)),
                q: FactorBlock::Full(gaussian_matrix(&mut rng, 3, 1)),
            },
        ];
        for m in msgs {
            let back = CompressedMessage::decode_bytes(&m.encode_with(ValueWidth::F64)).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn canonical_encoding_rounds_to_f32() {
        let m = CompressedMessage::Dense(Matrix::from_rows(&[&[0.1, 2.0]]).unwrap());
        let back = CompressedMessage::decode_bytes(&m.encode()).unwrap().reconstruct().unwrap();
        assert_eq!(back.data(), &[f64::from(0.1f32), 2.0]);
    }

    #[test]
    fn quantized_low_rank_survives_canonical_encoding() {
        let m = low_rank(6);
        assert_eq!(CompressedMessage::decode_bytes(&m.encode()).unwrap(), m);
    }

    #[test]
    fn corrupt_payloads_are_format_errors() {
        let m = low_rank(7).encode();
        for bad in [&m[..0], &m[..1], &m[..m.len() - 1]] {
            assert!(matches!(CompressedMessage::decode_bytes(bad), Err(Error::Format(_))));
        }
        let mut bad_tag = m.clone();
        bad_tag[0] = 9;
        assert!(matches!(CompressedMessage::decode_bytes(&bad_tag), Err(Error::Format(_))));
        let mut extra = m;
        extra.push(0);
        assert!(matches!(CompressedMessage::decode_bytes(&extra), Err(Error::Format(_))));

        let sparse = CompressedMessage::TopKSparse(SparseMatrix {
            rows: 1,
            cols: 2,
            indices: vec![5],
            values: vec![1.0],
        });
        assert!(matches!(CompressedMessage::decode_bytes(&sparse.encode()), Err(Error::Format(_))));
    }
}

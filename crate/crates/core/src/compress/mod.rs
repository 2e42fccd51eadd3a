//! Gradient compressors.
//!
//! Every compressor runs a small round protocol per layer and step:
//! [`LayerCompressor::begin`] produces the first message, the group mean of
//! that round is handed back through [`LayerCompressor::absorb`], which either
//! asks for another round or finishes with the reconstructed update.
//! Identity and Top-K finish after one round. The low-rank compressors need
//! two: the `P` factor is averaged before `Q = G'ᵀ P` is formed, so every
//! worker builds `Q` against the same shared `P`.

mod lowrank;
mod message;
mod topk;

pub use lowrank::{compress_lqsgd, finalize_lqsgd, CompressorState, FactorCodec, LowRankCompressor};
pub use message::{
    CompressedMessage, FactorBlock, SparseMatrix, ValueWidth, DENSE_HEADER_BITS, FACTOR_HEADER_BITS,
    FLOAT_BITS, SPARSE_ENTRY_BITS, TAG_BITS, TOPK_HEADER_BITS,
};
pub use topk::{compress_topk, topk_count, TopKCompressor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quantizer::QuantConfig;
use crate::tensor::Tensor;

/// How a parameter tensor is presented to a compressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub original_dims: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    /// Vectors (and scalars) are never low-rank compressed.
    pub passthrough: bool,
}

impl LayerShape {
    pub fn of(dims: &[usize]) -> Self {
        match dims {
            [] => Self { original_dims: vec![], rows: 1, cols: 1, passthrough: true },
            [n] => Self { original_dims: dims.to_vec(), rows: 1, cols: *n, passthrough: true },
            [first, rest @ ..] => Self {
                original_dims: dims.to_vec(),
                rows: *first,
                cols: rest.iter().product(),
                passthrough: false,
            },
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn restore(&self, m: Matrix) -> Result<Tensor> {
        m.expect_dims(self.dims())?;
        Tensor::new(self.original_dims.clone(), m.into_data())
    }
}

/// Views a tensor as a matrix: 2-D tensors unchanged, k-D tensors folded as
/// `dim0 × (product of the rest)`, vectors as a flagged `1 × n` row.
pub fn reshape_to_matrix(grad: &Tensor) -> Result<(Matrix, LayerShape)> {
    if !grad.is_finite() {
        return Err(Error::Data("gradient contains non-finite values".into()));
    }
    let shape = LayerShape::of(grad.shape());
    let m = Matrix::new(shape.rows, shape.cols, grad.data().to_vec())?;
    Ok((m, shape))
}

fn default_true() -> bool {
    true
}

fn default_bits() -> u32 {
    8
}

fn default_alpha() -> f64 {
    1.0
}

/// Compressor choice and hyperparameters. `bits_*` of 32 means the factor is
/// sent unquantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum CompressorSpec {
    Identity,
    TopK {
        k_fraction: f64,
        #[serde(default = "default_true")]
        error_feedback: bool,
    },
    PowerSgd {
        rank: usize,
        #[serde(default = "default_true")]
        error_feedback: bool,
    },
    LqSgd {
        rank: usize,
        #[serde(default = "default_bits")]
        bits_p: u32,
        #[serde(default = "default_bits")]
        bits_q: u32,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_true")]
        error_feedback: bool,
    },
}

impl CompressorSpec {
    pub fn lqsgd(rank: usize, bits: u32, alpha: f64) -> Self {
        CompressorSpec::LqSgd { rank, bits_p: bits, bits_q: bits, alpha, error_feedback: true }
    }

    pub fn powersgd(rank: usize) -> Self {
        CompressorSpec::PowerSgd { rank, error_feedback: true }
    }

    pub fn topk(k_fraction: f64) -> Self {
        CompressorSpec::TopK { k_fraction, error_feedback: true }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            CompressorSpec::Identity => "identity",
            CompressorSpec::TopK { .. } => "topk",
            CompressorSpec::PowerSgd { .. } => "powersgd",
            CompressorSpec::LqSgd { .. } => "lqsgd",
        }
    }

    /// Short stable label, e.g. `lqsgd-r1-b8-a1`.
    pub fn label(&self) -> String {
        let ef = |on: bool| if on { "" } else { "-noef" };
        match self {
            CompressorSpec::Identity => "identity".into(),
            CompressorSpec::TopK { k_fraction, error_feedback } => {
                format!("topk-k{k_fraction}{}", ef(*error_feedback))
            }
            CompressorSpec::PowerSgd { rank, error_feedback } => {
                format!("powersgd-r{rank}{}", ef(*error_feedback))
            }
            CompressorSpec::LqSgd { rank, bits_p, bits_q, alpha, error_feedback } => {
                let bits = if bits_p == bits_q { format!("b{bits_p}") } else { format!("bp{bits_p}-bq{bits_q}") };
                format!("lqsgd-r{rank}-{bits}-a{alpha}{}", ef(*error_feedback))
            }
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            CompressorSpec::PowerSgd { rank, .. } | CompressorSpec::LqSgd { rank, .. } => Some(*rank),
            _ => None,
        }
    }

    /// Bits per transmitted scalar of the `P` factor, where meaningful.
    pub fn bits(&self) -> Option<u32> {
        match self {
            CompressorSpec::PowerSgd { .. } => Some(32),
            CompressorSpec::LqSgd { bits_p, .. } => Some(*bits_p),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressorSpec::Identity => Ok(()),
            CompressorSpec::TopK { k_fraction, .. } => {
                if !(*k_fraction > 0.0 && *k_fraction <= 1.0) {
                    return Err(Error::Config(format!("topk k_fraction must be in (0, 1], got {k_fraction}")));
                }
                Ok(())
            }
            CompressorSpec::PowerSgd { rank, .. } => validate_rank(*rank),
            CompressorSpec::LqSgd { rank, bits_p, bits_q, alpha, .. } => {
                validate_rank(*rank)?;
                FactorCodec::from_bits(*bits_p, *alpha)?;
                FactorCodec::from_bits(*bits_q, *alpha)?;
                Ok(())
            }
        }
    }

    /// Builds the compressor for one (worker, layer). `seed` drives the random
    /// initial `Q` and must be the same on every worker for a given layer.
    pub fn build(&self, shape: &LayerShape, seed: u64) -> Result<Box<dyn LayerCompressor>> {
        self.validate()?;
        if shape.passthrough {
            return Ok(Box::new(IdentityCompressor::new(shape.dims())));
        }
        Ok(match self {
            CompressorSpec::Identity => Box::new(IdentityCompressor::new(shape.dims())),
            CompressorSpec::TopK { k_fraction, error_feedback } => {
                Box::new(TopKCompressor::new(shape.dims(), *k_fraction, *error_feedback))
            }
            CompressorSpec::PowerSgd { rank, error_feedback } => Box::new(LowRankCompressor::new(
                CompressorState::new(shape.dims(), *rank, FactorCodec::Full, FactorCodec::Full, seed)
                    .with_error_feedback(*error_feedback),
            )),
            CompressorSpec::LqSgd { rank, bits_p, bits_q, alpha, error_feedback } => {
                Box::new(LowRankCompressor::new(
                    CompressorState::new(
                        shape.dims(),
                        *rank,
                        FactorCodec::from_bits(*bits_p, *alpha)?,
                        FactorCodec::from_bits(*bits_q, *alpha)?,
                        seed,
                    )
                    .with_error_feedback(*error_feedback),
                ))
            }
        })
    }
}

fn validate_rank(rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    Ok(())
}

/// What a finished step hands back.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Aggregated reconstruction, applied to the parameters.
    pub update: Matrix,
    /// The reconstruction error feedback charged against this worker:
    /// `g + E_prev = transmitted + E_new`.
    pub transmitted: Matrix,
}

pub enum Round {
    Send(CompressedMessage),
    Done(StepOutput),
}

pub trait LayerCompressor: Send {
    fn begin(&mut self, grad: &Matrix) -> Result<CompressedMessage>;

    /// Takes the group mean of the last round's messages.
    fn absorb(&mut self, aggregate: Matrix) -> Result<Round>;

    /// Accumulated error feedback, `None` for compressors that keep none.
    fn error(&self) -> Option<&Matrix>;
}

pub fn compress_identity(g: &Matrix) -> CompressedMessage {
    CompressedMessage::Dense(g.clone())
}

/// Reconstructs a message for a layer, checking its dimensions.
pub fn decode(msg: &CompressedMessage, shape: &LayerShape) -> Result<Matrix> {
    if let CompressedMessage::Factor(_) = msg {
        return Err(Error::Protocol("a lone factor does not decode to a layer".into()));
    }
    let m = msg.reconstruct()?;
    if m.dims() != shape.dims() {
        return Err(Error::Format(format!(
            "message decodes to {}x{}, layer is {}x{}",
            m.rows(),
            m.cols(),
            shape.rows,
            shape.cols
        )));
    }
    Ok(m)
}

pub struct IdentityCompressor {
    dims: (usize, usize),
    pending: Option<Matrix>,
}

impl IdentityCompressor {
    pub fn new(dims: (usize, usize)) -> Self {
        Self { dims, pending: None }
    }
}

impl LayerCompressor for IdentityCompressor {
    fn begin(&mut self, grad: &Matrix) -> Result<CompressedMessage> {
        grad.expect_dims(self.dims)?;
        self.pending = Some(grad.clone());
        Ok(compress_identity(grad))
    }

    fn absorb(&mut self, aggregate: Matrix) -> Result<Round> {
        let sent = self.pending.take().ok_or_else(|| Error::Protocol("absorb before begin".into()))?;
        aggregate.expect_dims(self.dims)?;
        Ok(Round::Done(StepOutput { update: aggregate, transmitted: sent }))
    }

    fn error(&self) -> Option<&Matrix> {
        None
    }
}

/// Configuration of a single factor codec from a bit width.
impl FactorCodec {
    pub fn from_bits(bits: u32, alpha: f64) -> Result<Self> {
        if bits == 32 {
            return Ok(FactorCodec::Full);
        }
        let bits = u8::try_from(bits).map_err(|_| Error::Config(format!("unsupported bit width {bits}")))?;
        Ok(FactorCodec::Log(QuantConfig::new(bits, alpha)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_policy() {
        let (m, s) = reshape_to_matrix(&Tensor::zeros(vec![64, 128])).unwrap();
        assert_eq!((m.dims(), s.passthrough), ((64, 128), false));
        let (m, s) = reshape_to_matrix(&Tensor::zeros(vec![32, 16, 3, 3])).unwrap();
        assert_eq!((m.dims(), s.passthrough), ((32, 144), false));
        let (m, s) = reshape_to_matrix(&Tensor::zeros(vec![64])).unwrap();
        assert_eq!((m.dims(), s.passthrough), ((1, 64), true));
        assert_eq!(s.restore(m).unwrap().shape(), &[64]);
    }

    #[test]
    fn reshape_rejects_non_finite() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(reshape_to_matrix(&t), Err(Error::Data(_))));
    }

    #[test]
    fn identity_round_trip_and_accounting() {
        let g = Matrix::from_rows(&[&[1.5, -2.0, 3.25]]).unwrap();
        let msg = compress_identity(&g);
        assert_eq!(decode(&msg, &LayerShape::of(&[1, 3])).unwrap(), g);
        assert_eq!(msg.wire_size().payload_bits, 32 * 3);
        assert_eq!(msg.wire_size().metadata_bits, DENSE_HEADER_BITS);

        let mut c = IdentityCompressor::new((1, 3));
        for _ in 0..3 {
            c.begin(&g).unwrap();
            assert!(c.error().is_none());
            match c.absorb(g.clone()).unwrap() {
                Round::Done(out) => assert_eq!(out.transmitted, g),
                Round::Send(_) => panic!("identity takes one round"),
            }
        }
    }

    #[test]
    fn decode_checks_dims() {
        let msg = compress_identity(&Matrix::zeros(2, 2));
        assert!(matches!(decode(&msg, &LayerShape::of(&[2, 3])), Err(Error::Format(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(CompressorSpec::topk(0.0).validate().is_err());
        assert!(CompressorSpec::topk(1.5).validate().is_err());
        assert!(CompressorSpec::powersgd(0).validate().is_err());
        assert!(CompressorSpec::lqsgd(1, 1, 1.0).validate().is_err());
        assert!(CompressorSpec::lqsgd(1, 8, -1.0).validate().is_err());
        assert!(CompressorSpec::lqsgd(1, 32, 1.0).validate().is_ok());
        assert_eq!(CompressorSpec::lqsgd(1, 8, 1.0).label(), "lqsgd-r1-b8-a1");
    }

    #[test]
    fn spec_parses_from_toml() {
        #[derive(Deserialize)]
        struct Wrap {
            c: Vec<CompressorSpec>,
        }
        let w: Wrap = toml::from_str(
            r#"
            [[c]]
            method = "lqsgd"
            rank = 2
            bits_p = 4
            [[c]]
            method = "topk"
            k_fraction = 0.1
            error_feedback = false
            [[c]]
            method = "identity"
            "#,
        )
        .unwrap();
        assert_eq!(
            w.c,
            vec![
                CompressorSpec::LqSgd { rank: 2, bits_p: 4, bits_q: 8, alpha: 1.0, error_feedback: true },
                CompressorSpec::TopK { k_fraction: 0.1, error_feedback: false },
                CompressorSpec::Identity,
            ]
        );
    }
}

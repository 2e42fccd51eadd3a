//! PowerSGD-style rank-r compression with optional log quantization of the
//! factors (LQ-SGD), warm-started `Q` and local error feedback.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, orthonormalize, Matrix};
use crate::quantizer::{log_quantize, QuantConfig};
use crate::rng::SeededRng;

use super::{CompressedMessage, FactorBlock, LayerCompressor, Round, StepOutput};

/// How one factor is put on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FactorCodec {
    /// Unquantized; charged at 32 bits per scalar.
    Full,
    Log(QuantConfig),
}

impl FactorCodec {
    pub fn encode(&self, m: &Matrix) -> Result<FactorBlock> {
        match self {
            FactorCodec::Full => Ok(FactorBlock::Full(m.clone())),
            FactorCodec::Log(cfg) => Ok(FactorBlock::Quantized(log_quantize(m, *cfg)?)),
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            FactorCodec::Full => 32,
            FactorCodec::Log(cfg) => u32::from(cfg.bits()),
        }
    }
}

/// Per-(worker, layer) state of a low-rank compressor.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorState {
    /// `m × r`, absent until the first step completes.
    pub q_warm: Option<Matrix>,
    /// `n × m`, starts at zero.
    pub error: Matrix,
    pub rank: usize,
    pub quant_p: FactorCodec,
    pub quant_q: FactorCodec,
    pub step: u64,
    /// Seed of the initial Gaussian `Q`.
    pub seed: u64,
    pub error_feedback: bool,
}

impl CompressorState {
    /// `rank` is clamped to `min(n, m)`.
    pub fn new(dims: (usize, usize), rank: usize, quant_p: FactorCodec, quant_q: FactorCodec, seed: u64) -> Self {
        let (n, m) = dims;
        Self {
            q_warm: None,
            error: Matrix::zeros(n, m),
            rank: rank.clamp(1, n.min(m)),
            quant_p,
            quant_q,
            step: 0,
            seed,
            error_feedback: true,
        }
    }

    pub fn with_error_feedback(mut self, on: bool) -> Self {
        self.error_feedback = on;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        self.error.dims()
    }

    /// `G' = g + E`.
    fn corrected(&self, g: &Matrix) -> Result<Matrix> {
        g.expect_dims(self.dims())?;
        g.add(&self.error)
    }

    fn current_q(&self) -> Matrix {
        match &self.q_warm {
            Some(q) => q.clone(),
            None => gaussian_matrix(&mut SeededRng::new(self.seed), self.dims().1, self.rank),
        }
    }

    /// Records a finished step: `E ← G' − Ĝ`, `Q ← Q̂`.
    fn finish(&mut self, g_prime: Matrix, g_hat: &Matrix, q: Matrix) -> Result<()> {
        if self.error_feedback {
            self.error = g_prime.sub(g_hat)?;
        }
        self.q_warm = Some(q);
        self.step += 1;
        Ok(())
    }
}

/// `P = orthonormalize(G' Q)`.
fn power_step(g_prime: &Matrix, q: &Matrix) -> Result<Matrix> {
    orthonormalize(&g_prime.matmul(q)?)
}

/// Single-party compression of one step: both factors in one message, `Q'`
/// formed against the locally dequantized `P`. The state is not modified.
pub fn compress_lqsgd(g: &Matrix, state: &CompressorState) -> Result<CompressedMessage> {
    let g_prime = state.corrected(g)?;
    let p = power_step(&g_prime, &state.current_q())?;
    let p_block = state.quant_p.encode(&p)?;
    let q = g_prime.t_matmul(&p_block.values()?)?;
    let q_block = state.quant_q.encode(&q)?;
    Ok(CompressedMessage::LowRankQuantized { p: p_block, q: q_block })
}

/// Reconstructs `Ĝ = P Qᵀ` from an aggregated factor pair, updates the error
/// feedback and warm start, and returns `Ĝ`.
pub fn finalize_lqsgd(g: &Matrix, aggregated: &CompressedMessage, state: &mut CompressorState) -> Result<Matrix> {
    let CompressedMessage::LowRankQuantized { p, q } = aggregated else {
        return Err(Error::Protocol(format!(
            "finalize expects a low-rank message, got {}",
            aggregated.variant_name()
        )));
    };
    let (n, m) = state.dims();
    let p = p.values()?;
    let q = q.values()?;
    p.expect_dims((n, state.rank)).map_err(|e| Error::Protocol(e.to_string()))?;
    q.expect_dims((m, state.rank)).map_err(|e| Error::Protocol(e.to_string()))?;
    let g_prime = state.corrected(g)?;
    let g_hat = p.matmul_t(&q)?;
    state.finish(g_prime, &g_hat, q)?;
    Ok(g_hat)
}

enum Pending {
    Idle,
    AwaitP { g_prime: Matrix },
    AwaitQ { g_prime: Matrix, p: Matrix },
}

/// Two-round protocol: send `P`, receive the group mean, send `Q = G'ᵀ P̄`,
/// receive the group mean `Q̄`, reconstruct `P̄ Q̄ᵀ`.
pub struct LowRankCompressor {
    state: CompressorState,
    pending: Pending,
}

impl LowRankCompressor {
    pub fn new(state: CompressorState) -> Self {
        Self { state, pending: Pending::Idle }
    }

    pub fn state(&self) -> &CompressorState {
        &self.state
    }
}

impl LayerCompressor for LowRankCompressor {
    fn begin(&mut self, grad: &Matrix) -> Result<CompressedMessage> {
        if !matches!(self.pending, Pending::Idle) {
            return Err(Error::Protocol("begin called mid-step".into()));
        }
        let g_prime = self.state.corrected(grad)?;
        let p = power_step(&g_prime, &self.state.current_q())?;
        let block = self.state.quant_p.encode(&p)?;
        self.pending = Pending::AwaitP { g_prime };
        Ok(CompressedMessage::Factor(block))
    }

    fn absorb(&mut self, aggregate: Matrix) -> Result<Round> {
        let (n, m) = self.state.dims();
        match std::mem::replace(&mut self.pending, Pending::Idle) {
            Pending::Idle => Err(Error::Protocol("absorb before begin".into())),
            Pending::AwaitP { g_prime } => {
                aggregate.expect_dims((n, self.state.rank)).map_err(|e| Error::Protocol(e.to_string()))?;
                let q = g_prime.t_matmul(&aggregate)?;
                let block = self.state.quant_q.encode(&q)?;
                self.pending = Pending::AwaitQ { g_prime, p: aggregate };
                Ok(Round::Send(CompressedMessage::Factor(block)))
            }
            Pending::AwaitQ { g_prime, p } => {
                aggregate.expect_dims((m, self.state.rank)).map_err(|e| Error::Protocol(e.to_string()))?;
                let g_hat = p.matmul_t(&aggregate)?;
                self.state.finish(g_prime, &g_hat, aggregate)?;
                Ok(Round::Done(StepOutput { update: g_hat.clone(), transmitted: g_hat }))
            }
        }
    }

    fn error(&self) -> Option<&Matrix> {
        Some(&self.state.error)
    }
}

//! Gradient compression for data-parallel SGD: low-rank factorization with
//! logarithmic factor quantization and error feedback (LQ-SGD), alongside
//! PowerSGD, Top-K and uncompressed baselines.
//!
//! The crate also carries the pieces needed to evaluate them at desk scale:
//! a simulated worker group with a bit-exact communication ledger, small
//! models with hand-written gradients, and a gradient inversion attack scored
//! with SSIM.

pub mod attack;
pub mod comm;
pub mod compress;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use tensor::{NamedTensors, Tensor};

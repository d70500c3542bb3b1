//! Deterministic pseudo-randomness, dense-array arithmetic, and the
//! statistics/quality metrics used across the crate.

mod metrics;
mod prng;
mod tensor;

pub use metrics::{l1_rel, pearson, psnr, spearman, ssim};
pub use prng::PrngStream;
pub use tensor::Tensor2D;

//! Conditional denoising diffusion for binary segmentation.

pub mod ablation;
pub mod autograd;
pub mod error;
pub mod ffparser;
mod kernels;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod params;
mod plot;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod staple;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use mask::Mask;
pub use scalar::Scalar;
pub use tensor::Tensor;

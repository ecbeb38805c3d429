//! Slice interpolation for anisotropic volumes with a conditional denoising
//! diffusion model.

mod error;

pub use error::{Error, Result};
pub use interslice_tensor::Tensor;

pub mod conditioning;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod metrics;
pub mod network;
pub mod sampler;
pub mod schedule;
pub mod trainer;

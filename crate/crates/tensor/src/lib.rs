//! Small reverse-mode autodiff engine for convolutional networks on the CPU.
//!
//! Tensors are dense and row-major; image tensors use `[N, C, H, W]`. The
//! engine is generic over [`Scalar`] so the same network runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use graph::{Grads, Graph, Var, GROUP_NORM_EPS};
pub use params::{ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::Tensor;

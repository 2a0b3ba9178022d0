//! A small, deterministic reverse-mode autograd engine.
//!
//! Tensors are dense row-major buffers generic over [`Scalar`] (`f32` or
//! `f64`). All math runs single-threaded, so a fixed seed yields bit-identical
//! results across runs.

mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BackwardCtx, Gradients, Graph, Var};
pub use ops::bilinear_matrix;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

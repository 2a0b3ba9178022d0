//! Latent-diffusion features for text-based segmentation on synthetic scenes.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod evalmetrics;
pub mod latentae;
pub mod probes;
pub mod rng;
pub mod segnets;
pub mod synthdata;
pub mod textenc;

pub use error::{LdzError, Result};
pub use ldz_tensor::Scalar;

pub type Tensor32 = ldz_tensor::Tensor<f32>;
pub type Tensor64 = ldz_tensor::Tensor<f64>;
pub type ParamStore32 = ldz_tensor::ParamStore<f32>;
pub type ParamStore64 = ldz_tensor::ParamStore<f64>;

//! Differentiable operations, all implemented as methods on [`crate::Graph`].
//!
//! Shape mismatches are programming errors and panic.

mod conv;
pub(crate) mod elementwise;
mod linalg;
mod norm;
mod reduce;
pub(crate) mod shape;

pub use shape::bilinear_matrix;

//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The crate is deliberately small: a [`Matrix`] type backed by `gemm` for the
//! heavy products, a [`Graph`] tape that records matrix operations, and a
//! [`ParamStore`] of named trainable weights.

mod graph;
mod matrix;
mod params;

pub use graph::{rms_normalize, softmax_rows, Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::ParamStore;

/// Incompatible operand shapes.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

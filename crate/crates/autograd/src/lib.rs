//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: an eager [`Graph`] records the ops a
//! network needs (convolutions, a linear head, pointwise activations, a few
//! reductions) and [`Graph::backward`] walks the record in reverse.
//!
//! Second-order terms such as a critic gradient penalty are expressed with
//! [`Graph::conv2d_input_grad`], which is itself differentiable, so the input
//! gradient of a piecewise-linear network can be built as ordinary graph
//! nodes and differentiated again.

pub mod conv;
mod graph;
mod optim;
mod store;
mod tensor;

use thiserror::Error;

pub use graph::{sigmoid, Bound, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use store::{kaiming_uniform, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Mismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("shape {shape:?} holds {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("invalid convolution: {detail}")]
    Conv { detail: String },
    #[error("empty tensor list")]
    Empty,
    #[error("backward needs a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown or missing parameter {0:?}")]
    UnknownParam(String),
}

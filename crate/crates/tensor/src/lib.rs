//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Graph`], which owns every intermediate of one forward pass and
//! hands out [`Var`] handles. Model code creates parameter leaves on a fresh
//! graph per step, runs the forward pass, calls [`Graph::backward`] on the
//! scalar loss and reads the leaf gradients back out.

mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{gelu, Graph, Var, RMS_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    OutOfRange { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

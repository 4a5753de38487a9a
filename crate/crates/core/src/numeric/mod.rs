//! Dense numeric engine with define-by-run reverse-mode differentiation.
//!
//! Tensors are row-major and immutable once recorded. Everything the model
//! needs is expressed with a small op set over 2D `[rows, cols]` tensors;
//! operations defined in other modules plug in through [`CustomOp`].

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use graph::softplus;
pub use graph::{AttnBlock, CustomOp, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::{AttnMask, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("fully masked row {0}")]
    FullyMaskedRow(usize),
}

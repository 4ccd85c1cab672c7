//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Forward operations are recorded on a [`Tape`] as they execute; calling
//! [`Tape::backward`] walks the records in exact reverse order and applies each
//! operation's backward rule. Everything needed by the detector and the domain
//! classifiers lives here, including [`Tape::grad_reverse`], the identity map
//! whose backward rule negates the incoming gradient.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_gradients, GradientComparison};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("expected a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("function value is not finite: {0}")]
    NonFinite(f64),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("finite-difference step must lie in (0, 1e-2], got {0}")]
    BadStep(f64),
}

//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Covers exactly what the encoder, the losses, and gradient-based
//! attribution need: elementwise activations, matrix products, segment
//! softmax/sum for neighbourhood aggregation, batch normalisation, and
//! l2 normalisation, all over 64-bit floats.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::gradcheck;
pub use tape::{BatchNormStats, Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("numeric fault in {op}: non-finite or invalid value")]
    NumericFault { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("no gradient for node {0}: detached or unreachable from the output")]
    DetachedNode(usize),
}

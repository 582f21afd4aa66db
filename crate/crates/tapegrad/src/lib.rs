//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations as they execute (define-by-run) and replays
//! them in reverse to accumulate gradients. Tensors created outside a tape are
//! plain immutable values; ops applied to them compute forward results without
//! recording anything, so detaching a subgraph is just "don't attach its
//! inputs".
//!
//! Everything is `f64`. The op set is deliberately small: dense elementwise
//! arithmetic, matrix products, gather/scatter by row index, segment
//! reductions, stable softmax, and a few reductions tailored to min-sum
//! message passing. No broadcasting beyond scalars.

mod fdcheck;
mod tape;
mod tensor;

pub use fdcheck::{central_diff_grad, max_rel_err};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeRef, Tensor};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("tensor has {values} values but shape {shape:?} requires {expected}")]
    ShapeLenMismatch {
        shape: Vec<usize>,
        values: usize,
        expected: usize,
    },
    #[error("{op}: index {index} out of bounds (< {bound} required)")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("segment {segment} is empty")]
    EmptySegment { segment: usize },
    #[error("{op}: tensor belongs to a different tape")]
    ForeignTape { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward requires a tape-attached loss")]
    DetachedLoss,
    #[error("leaf requires a constant tensor (already attached to a tape)")]
    AlreadyAttached,
}

pub type Result<T> = std::result::Result<T, Error>;

//! Deterministic differentiable-array substrate.

mod gradcheck;
pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, relative_error};
pub use tape::{Tape, Var};
pub(crate) use tape::accumulate_forward;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite function value {value} during evaluation")]
    NonFinite { value: f64 },
}

//! Dense tensor arithmetic with tape-based reverse-mode gradients.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{GradStore, ParamStore, PARAMS_FORMAT, PARAMS_VERSION};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bound {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("{op}: input {value} outside domain")]
    Domain { op: &'static str, value: f64 },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parameter file: {0}")]
    Format(String),
}

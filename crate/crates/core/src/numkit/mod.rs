//! Dense tensors, a reverse-mode tape, optimizers and losses.

pub mod check;
pub mod loss;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{log_sum_exp, sigmoid, softplus, Tape, Var};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: operand {value} at flat index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
}

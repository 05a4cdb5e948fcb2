//! Dense f64 tensors with reverse-mode differentiation, sized for desk-scale
//! experiments, plus a finite-difference oracle to keep the backward honest.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::check_gradients;
pub use tape::{focal_loss_per_row, reparam_sample, GradStore, Mask, Tape, Var};
pub use tensor::Tensor;

pub type NumericResult<T> = Result<T, NumericError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("objective non-finite at perturbed input {input}, coordinate {coord}")]
    NonFiniteObjective { input: usize, coord: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

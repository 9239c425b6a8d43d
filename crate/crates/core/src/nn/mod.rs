//! Dense tensors with reverse-mode differentiation over a recorded tape.
//!
//! Only the primitives the dual encoder and its losses need are provided.
//! Every op is generic over [`Scalar`] so the same graph can be evaluated in
//! `f64` for finite-difference verification and in `f32` for training.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;
#[cfg(test)]
mod tests;

use std::fmt::Debug;
use std::iter::Sum;

use thiserror::Error;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_coords, finite_difference_check_piecewise, relative_error,
    MAX_STEP_REDUCTIONS,
};
pub use optim::{adam_step, AdamConfig, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Real number type the tape runs on.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + Debug + Sum + Send + Sync + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: output size would be {h}x{w}")]
    OutputSize { op: &'static str, h: i64, w: i64 },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange { op: &'static str, index: usize, size: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::ShapeMismatch { op, detail: detail.into() }
}

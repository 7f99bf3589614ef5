//! Differentiable array toolkit: dense `f64` tensors, a reverse-mode tape,
//! and a finite-difference verifier.

mod gradcheck;
pub mod init;
mod kernels;
pub mod ops;
mod params;
mod tape;
mod tensor;


use thiserror::Error;

pub use gradcheck::{check_param_gradient, finite_diff_check, finite_diff_check_at, relative_error, DEFAULT_STEP};
pub use ops::{cross_entropy, gelu, layer_norm, matmul, sigmoid, softmax_rows, GELU_TANH_COEFF};
pub use params::ParamSet;
pub use tape::{AttentionRecord, AttnLayout, Gradients, ParamRef, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("every target is missing")]
    AllTargetsMissing,
    #[error("non-finite gradient at coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },
}

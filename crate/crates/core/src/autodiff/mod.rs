//! Minimal reverse-mode differentiation over dense tensors.
//!
//! The op set is closed: dense layers, strided convolutions and their
//! adjoints, pointwise activations, differentiable field composition, and the
//! reductions the autoencoder losses need. Every op is checked against
//! central finite differences (see [`gradcheck`]).

mod adam;
pub mod conv;
mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;
pub mod warp;

pub use adam::{adam_step, AdamState};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::latent_row;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

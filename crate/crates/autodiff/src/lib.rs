//! Dense row-major tensors with a tape-based reverse-mode differentiator.
//!
//! Every value flowing through a [`Tape`] is viewed as a 2-D matrix
//! (`rows × cols`); vectors are `1 × n` rows. Trainable tensors live in a
//! [`ParamStore`] and are bound onto a fresh tape for each forward pass, so the
//! tape itself never outlives a single loss evaluation.
//!
//! The engine is generic over [`Scalar`] so the same graph-building code can be
//! run in `f32` for training and re-executed in `f64` by [`gradcheck`].

mod adam;
mod error;
pub mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::TensorError;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Segment, Tape, Unary, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

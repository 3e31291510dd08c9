//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable programs are recorded on a
//! [`Tape`] as they execute and replayed backwards by [`Tape::backward`].
//! Gradients are accumulated per tape node, so a tensor that feeds several
//! consumers receives the sum of their contributions.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{Adam, AdamState};
pub use tape::{ConvGeometry, Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

use std::collections::BTreeMap;

/// Named parameters of a model, kept in sorted name order.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

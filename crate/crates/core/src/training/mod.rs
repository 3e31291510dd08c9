//! Losses, the learning rate schedule and the training loop.
//!
//! Two objectives are supported: cross-entropy over writer classes through
//! the classifier head, and batch-hard triplet loss on the l2-normalized
//! descriptors with Euclidean distances and P×Q class-balanced batches.

mod config;
mod schedule;
mod trainer;

pub use config::{LossKind, TrainConfig};
pub use schedule::{lr_at, Schedule};
pub use trainer::{accuracy, accuracy_of, BestModel, LabeledImages, LogRecord, TrainState, Trainer};

use crate::error::Result;
use crate::numerics::{Scalar, Tape, Var};

/// Mean negative log-softmax of the true class; see [`Tape::cross_entropy`].
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Batch-hard triplet loss; see [`Tape::batch_hard_triplet`].
pub fn batch_hard_triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    descriptors: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    tape.batch_hard_triplet(descriptors, labels, T::from_f64_lossy(margin))
}

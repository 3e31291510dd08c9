//! Writer retrieval and identification on document fragments.
//!
//! The crate bundles everything needed to go from fragment images to ranked
//! retrieval reports:
//!
//! * [`numerics`]: a small dense tensor library with a reverse-mode tape.
//! * [`model`]: residual backbone, feature mixer blocks and the two-stage
//!   projection that produces the fragment descriptor.
//! * [`training`]: cross-entropy and batch-hard triplet losses, the warmup +
//!   cosine schedule and the training loop.
//! * [`preprocessing`]: raster images, Sauvola binarization and letterboxing.
//! * [`retrieval`]: descriptor sets, PCA whitening and leave-one-out ranking.
//! * [`data`]: manifests, dataset splits and a synthetic fragment generator.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod preprocessing;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
pub use model::{Aggregation, Model, ModelConfig};
pub use retrieval::{DescriptorSet, LabelKind, RetrievalReport};
pub use training::{LossKind, TrainConfig};

pub use numerics::{Scalar, Tape, Tensor, Var};



//! Fragment manifests, dataset splits and the synthetic corpus.

mod manifest;
mod split;
mod synth;

pub use manifest::{
    format_manifest, load_manifest, parse_manifest, validate_records, write_manifest, FragmentRecord, Manifest,
    MissingFiles, MANIFEST_COLUMNS,
};
pub use split::{
    apportion, canonical_writer, make_identification_split, make_kfold_splits, papyrow_folds, parse_folds, Part,
    SplitKind, SplitSpec,
};
pub use synth::{
    generate_synthetic_corpus, page_name, write_corpus, writer_name, ImageFormat, SynthConfig, SyntheticFragment,
};

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::Result;
use crate::numerics::{Scalar, Tensor};
use crate::preprocessing::{PreprocessConfig, RasterImage};

/// Dense class indices for string labels, in sorted label order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelIndex {
    index: BTreeMap<String, usize>,
}

impl LabelIndex {
    pub fn new<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<&str> = labels.into_iter().collect();
        names.sort_unstable();
        names.dedup();
        LabelIndex {
            index: names.into_iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn names(&self) -> Vec<&str> {
        self.index.keys().map(String::as_str).collect()
    }
}

/// Preprocesses `images` in parallel and stacks them into `[N×3×H×W]`.
pub fn images_to_tensor<T: Scalar>(images: &[RasterImage], pre: &PreprocessConfig) -> Result<Tensor<T>> {
    let tensors = images
        .par_iter()
        .map(|img| pre.to_tensor::<T>(img))
        .collect::<Result<Vec<_>>>()?;
    if tensors.is_empty() {
        return Ok(Tensor::zeros(&[0, 3, pre.height, pre.width]));
    }
    let refs: Vec<&Tensor<T>> = tensors.iter().collect();
    Tensor::stack(&refs)
}

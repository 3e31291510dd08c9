//! Descriptor extraction, PCA whitening and leave-one-out retrieval scoring.

mod descriptors;
mod ranking;
mod whiten;

pub use descriptors::{DescriptorRecord, DescriptorSet};
pub use ranking::{
    average_precision, format_table, rank_leave_one_out, rank_query, LabelKind, QueryResult, RetrievalReport, TOP_K,
};
pub use whiten::{apply_whiten, fit_whiten, WhitenTransform, WHITEN_EPS};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};

/// Tolerance on row norms accepted at ingestion.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Target whitening dimension, or `None` to rank raw descriptors.
    pub whiten_dim: Option<usize>,
    /// Lower the whitening dimension to `min(N−1, D)` instead of failing.
    pub clamp_whiten: bool,
    pub whiten_eps: f64,
    pub label_kinds: Vec<LabelKind>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            whiten_dim: Some(256),
            clamp_whiten: true,
            whiten_eps: WHITEN_EPS,
            label_kinds: LabelKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// The descriptors that were ranked (whitened when enabled).
    pub ranked: DescriptorSet,
    pub reports: Vec<RetrievalReport>,
}

impl Evaluation {
    pub fn report(&self, kind: LabelKind) -> Option<&RetrievalReport> {
        self.reports.iter().find(|r| r.label_kind == kind)
    }
}

/// Evaluation-mode descriptors for `images[N×C×H×W]`, one row per record in input order.
pub fn extract_descriptors<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    records: Vec<DescriptorRecord>,
    chunk: usize,
) -> Result<DescriptorSet> {
    if images.shape().first() != Some(&records.len()) {
        return Err(Error::dim(format!(
            "{} records for images of shape {:?}",
            records.len(),
            images.shape()
        )));
    }
    let d = model.descriptors_chunked(images, chunk)?;
    let dim = model.config().descriptor_dim();
    let data = d.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
    let mut set = DescriptorSet::new(dim, data, records)?;
    set.meta.insert("descriptor_dim".into(), dim.to_string());
    set.meta.insert("aggregation".into(), model.config().aggregation.to_string());
    set.meta.insert("mixer_depth".into(), model.config().mixer_depth.to_string());
    Ok(set)
}

/// Optionally whitens `set` (fitted on `set` itself) and ranks it once per label kind.
pub fn evaluate_set(set: &DescriptorSet, opts: &EvalOptions) -> Result<Evaluation> {
    set.check_normalized(NORM_TOLERANCE)?;
    let ranked = match opts.whiten_dim {
        Some(requested) => {
            let bound = set.len().saturating_sub(1).min(set.dim());
            let d = if opts.clamp_whiten && requested > bound {
                log::warn!("whitening dimension {requested} exceeds min(N−1, D) = {bound}; using {bound}");
                bound
            } else {
                requested
            };
            let t = fit_whiten(set, d, opts.whiten_eps)?;
            let mut w = apply_whiten(&t, set)?;
            w.meta.insert("whiten".into(), "on".into());
            w.meta.insert("whiten_requested_dim".into(), requested.to_string());
            w.meta.insert("whiten_fit".into(), "gallery".into());
            w.meta.insert("whiten_eps".into(), opts.whiten_eps.to_string());
            w
        }
        None => {
            let mut s = set.clone();
            s.meta.insert("whiten".into(), "off".into());
            s
        }
    };
    let reports = opts
        .label_kinds
        .iter()
        .map(|&k| rank_leave_one_out(&ranked, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { ranked, reports })
}

/// Extracts descriptors once and evaluates every requested label kind.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    records: Vec<DescriptorRecord>,
    opts: &EvalOptions,
    chunk: usize,
) -> Result<Evaluation> {
    let set = extract_descriptors(model, images, records, chunk)?;
    evaluate_set(&set, opts)
}

use std::fmt;
use std::str::FromStr;

use crate::config::KvDocument;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Triplet,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Triplet => "triplet",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::config(format!(
                "unknown loss {other:?} (expected cross_entropy or triplet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Cosine annealing ends at `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub loss_kind: LossKind,
    pub triplet_margin: f64,
    /// Writers per triplet batch (P).
    pub sampler_writers: usize,
    /// Samples per writer in a triplet batch (Q).
    pub sampler_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            batch_size: 128,
            warmup_epochs: 2,
            final_lr_fraction: 0.1,
            loss_kind: LossKind::CrossEntropy,
            triplet_margin: 0.15,
            sampler_writers: 4,
            sampler_samples: 4,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "epochs",
    "lr",
    "batch_size",
    "warmup_epochs",
    "final_lr_fraction",
    "loss",
    "triplet_margin",
    "sampler_writers",
    "sampler_samples",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config(format!(
                "final_lr_fraction must lie in (0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        if !(self.triplet_margin > 0.0) {
            return Err(Error::config(format!(
                "triplet_margin must be positive, got {}",
                self.triplet_margin
            )));
        }
        if self.loss_kind == LossKind::Triplet {
            if self.sampler_writers < 2 {
                return Err(Error::config("triplet batches need at least two writers"));
            }
            if self.sampler_samples < 2 {
                return Err(Error::config("triplet batches need at least two samples per writer"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("epochs", self.epochs);
        doc.set("lr", self.lr);
        doc.set("batch_size", self.batch_size);
        doc.set("warmup_epochs", self.warmup_epochs);
        doc.set("final_lr_fraction", self.final_lr_fraction);
        doc.set("loss", self.loss_kind);
        doc.set("triplet_margin", self.triplet_margin);
        doc.set("sampler_writers", self.sampler_writers);
        doc.set("sampler_samples", self.sampler_samples);
        doc.set("seed", self.seed);
        doc
    }

    /// Reads keys present in `doc` over the defaults.
    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        doc.reject_unknown(KEYS)?;
        let mut cfg = TrainConfig::default();
        doc.read_into("epochs", &mut cfg.epochs)?;
        doc.read_into("lr", &mut cfg.lr)?;
        doc.read_into("batch_size", &mut cfg.batch_size)?;
        doc.read_into("warmup_epochs", &mut cfg.warmup_epochs)?;
        doc.read_into("final_lr_fraction", &mut cfg.final_lr_fraction)?;
        doc.read_into("loss", &mut cfg.loss_kind)?;
        doc.read_into("triplet_margin", &mut cfg.triplet_margin)?;
        doc.read_into("sampler_writers", &mut cfg.sampler_writers)?;
        doc.read_into("sampler_samples", &mut cfg.sampler_samples)?;
        doc.read_into("seed", &mut cfg.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

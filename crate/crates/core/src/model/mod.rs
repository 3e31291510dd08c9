//! The three-stage retrieval network and its classification head.
//!
//! `image → backbone → feature mixer → aggregation → l2-normalize → descriptor`,
//! with an optional `dropout → linear` head on top of the descriptor for
//! writer identification. All stages are expressed on a [`Tape`], so the same
//! code serves training (parameters bound as gradient leaves) and inference
//! (parameters bound as constants).

pub mod backbone;
mod config;
pub mod head;
pub mod mixer;
pub mod projection;

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;

pub use config::{Aggregation, ModelConfig, ShapePlan, MODEL_SCHEMA_VERSION};

use crate::config::KvDocument;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Gradients, ParamStore, Scalar, Tape, Tensor, Var};

/// Epsilon of the final descriptor normalization.
pub const DESCRIPTOR_EPS: f64 = 1e-12;

const PARAM_PREFIX: &str = "param.";
const CONFIG_PREFIX: &str = "model.";

/// Parameter name → tape variable for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bindings {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("model has no parameter {name}")))
    }

    /// Gradients of every bound parameter that received one.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Backbone output, `[N×C×h×w]`.
    pub features: Var,
    /// Mixer output (equal to `features` when the mixer is disabled).
    pub mixed: Var,
    /// l2-normalized descriptor, `[N×D]`.
    pub descriptor: Var,
    pub logits: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds a randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init(&config, &mut params, &mut rng);
        mixer::init(&config, &mut params, &mut rng);
        if config.aggregation == Aggregation::Projection {
            projection::init(&config, &mut params, &mut rng);
        }
        head::init(&config, &mut params, &mut rng);
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Model::<T>::new(config.clone(), 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                None => return Err(Error::data(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::data(format!(
                        "parameter {name} has shape {:?}, config implies {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::data(format!("unexpected parameter {extra}")));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Sets every mixer scale vector to zero, which turns each block into the identity.
    pub fn zero_mixer_scales(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("mixer.") && (name.ends_with(".scale1") || name.ends_with(".scale2")) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    /// Records every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        Bindings::from_pairs(
            self.params
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable))),
        )
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_height, c.input_width];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::ResolutionMismatch {
                expected: format!("N×{}×{}×{}", expected[0], expected[1], expected[2]),
                actual: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Runs the network on `input[N×C×H×W]`.
    ///
    /// Logits are produced only when `with_logits` is set; dropout in the
    /// head is active only when `dropout_rng` is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        input: Var,
        with_logits: bool,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.shape(input))?;
        let cfg = &self.config;
        let features = backbone::forward(tape, p, cfg, input)?;
        let mixed = mixer::forward(tape, p, cfg, features)?;
        let raw = match cfg.aggregation {
            Aggregation::Projection => projection::forward(tape, p, mixed)?,
            Aggregation::AvgPool => projection::avg_pool(tape, mixed)?,
        };
        let descriptor = tape.l2_normalize(raw, 1, T::from_f64_lossy(DESCRIPTOR_EPS))?;
        let logits = if with_logits {
            Some(head::forward(tape, p, cfg, descriptor, dropout_rng)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            features,
            mixed,
            descriptor,
            logits,
        })
    }

    /// Evaluation-mode descriptors for a batch, without recording gradients.
    pub fn descriptors(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &p, x, false, None)?;
        Ok(tape.value(out.descriptor).clone())
    }

    /// Evaluation-mode logits (no dropout).
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &p, x, true, None)?;
        Ok(tape.value(out.logits.expect("requested")).clone())
    }

    /// [`Model::descriptors`] over fixed-size chunks of `images`, run in parallel.
    ///
    /// Chunk boundaries do not depend on the thread count, so results are
    /// identical for any pool size.
    pub fn descriptors_chunked(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        self.chunked(images, chunk, self.config.descriptor_dim(), Self::descriptors)
    }

    pub fn logits_chunked(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        self.chunked(images, chunk, self.config.num_classes.unwrap_or(0), Self::logits)
    }

    fn chunked(
        &self,
        images: &Tensor<T>,
        chunk: usize,
        width: usize,
        f: fn(&Self, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let chunk = chunk.max(1);
        let ranges: Vec<Vec<usize>> = (0..n)
            .step_by(chunk)
            .map(|s| (s..(s + chunk).min(n)).collect())
            .collect();
        let parts = ranges
            .par_iter()
            .map(|idx| f(self, &images.gather(idx)?))
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, width]));
        }
        Tensor::concat(&parts)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (k, v) in self.config.to_kv().iter() {
            ckpt.meta.insert(format!("{CONFIG_PREFIX}{k}"), v.to_string());
        }
        ckpt.insert_all(PARAM_PREFIX, &self.params);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut doc = KvDocument::new();
        for (k, v) in &ckpt.meta {
            if let Some(key) = k.strip_prefix(CONFIG_PREFIX) {
                doc.set(key, v);
            }
        }
        if doc.is_empty() {
            return Err(Error::data("checkpoint carries no model configuration"));
        }
        let config = ModelConfig::from_kv(&doc)?;
        Model::from_parts(config, ckpt.extract(PARAM_PREFIX))
    }
}

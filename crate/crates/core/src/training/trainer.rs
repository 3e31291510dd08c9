//! The optimization loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossKind, Schedule, TrainConfig};
use crate::config::KvDocument;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Adam, AdamState, Checkpoint, ParamStore, Scalar, Tape, Tensor};

/// Images `[N×C×H×W]` with one class index per image.
#[derive(Debug, Clone)]
pub struct LabeledImages<T: Scalar> {
    images: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "expected N×C×H×W images for {} labels, got {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of distinct labels.
    pub fn class_count(&self) -> usize {
        let mut seen = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        groups
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel<T: Scalar> {
    pub epoch: usize,
    /// Higher is better.
    pub score: f64,
    pub params: ParamStore<T>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdamState<T>,
    pub epochs_done: usize,
    pub step: usize,
    pub best: Option<BestModel<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        TrainState {
            model,
            optimizer: AdamState::default(),
            epochs_done: 0,
            step: 0,
            best: None,
        }
    }

    /// The best model seen so far, or the current one before any epoch finished.
    pub fn best_model(&self) -> Model<T> {
        match &self.best {
            Some(b) => Model::from_parts(self.model.config().clone(), b.params.clone())
                .expect("best parameters share the model layout"),
            None => self.model.clone(),
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.insert_all("adam.m.", &self.optimizer.m);
        ckpt.insert_all("adam.v.", &self.optimizer.v);
        let meta = &mut ckpt.meta;
        meta.insert("train.adam_step".into(), self.optimizer.step.to_string());
        meta.insert("train.epochs_done".into(), self.epochs_done.to_string());
        meta.insert("train.step".into(), self.step.to_string());
        for (k, v) in cfg.to_kv().iter() {
            meta.insert(format!("train.config.{k}"), v.to_string());
        }
        if let Some(best) = &self.best {
            meta.insert("train.best_epoch".into(), best.epoch.to_string());
            meta.insert("train.best_score".into(), best.score.to_string());
            ckpt.insert_all("best.param.", &best.params);
        }
        ckpt
    }

    /// Restores the state and the configuration it was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let model = Model::from_checkpoint(ckpt)?;
        let meta = |key: &str| -> Result<&str> {
            ckpt.meta
                .get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::data(format!("checkpoint lacks {key}; it holds no training state")))
        };
        let num = |key: &str| -> Result<u64> {
            meta(key)?
                .parse()
                .map_err(|_| Error::data(format!("checkpoint field {key} is not an integer")))
        };
        let mut doc = KvDocument::new();
        for (k, v) in &ckpt.meta {
            if let Some(key) = k.strip_prefix("train.config.") {
                doc.set(key, v);
            }
        }
        let cfg = TrainConfig::from_kv(&doc)?;
        let optimizer = AdamState {
            step: num("train.adam_step")?,
            m: ckpt.extract("adam.m."),
            v: ckpt.extract("adam.v."),
        };
        let best = match ckpt.meta.get("train.best_epoch") {
            None => None,
            Some(_) => {
                let score = meta("train.best_score")?
                    .parse()
                    .map_err(|_| Error::data("checkpoint best score is not a number"))?;
                let best = Model::from_parts(model.config().clone(), ckpt.extract("best.param."))?;
                Some(BestModel {
                    epoch: num("train.best_epoch")? as usize,
                    score,
                    params: best.params().clone(),
                })
            }
        };
        let state = TrainState {
            model,
            optimizer,
            epochs_done: num("train.epochs_done")? as usize,
            step: num("train.step")? as usize,
            best,
        };
        Ok((state, cfg))
    }
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | purpose);
    rng
}

const BATCH_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;

/// Runs epochs of Adam over a [`LabeledImages`] set.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    /// Batch size used for evaluation passes.
    pub eval_chunk: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            adam: Adam::default(),
            eval_chunk: 32,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn batch_len(&self) -> usize {
        match self.cfg.loss_kind {
            LossKind::CrossEntropy => self.cfg.batch_size,
            LossKind::Triplet => self.cfg.sampler_writers * self.cfg.sampler_samples,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_len()).max(1)
    }

    pub fn schedule(&self, n_train: usize) -> Schedule {
        Schedule::new(&self.cfg, self.steps_per_epoch(n_train))
    }

    /// Index lists of every batch in `epoch`, a pure function of the seed and epoch.
    pub fn epoch_batches<T: Scalar>(&self, set: &LabeledImages<T>, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = epoch_rng(self.cfg.seed, epoch, BATCH_STREAM);
        match self.cfg.loss_kind {
            LossKind::CrossEntropy => {
                let mut order: Vec<usize> = (0..set.len()).collect();
                order.shuffle(&mut rng);
                order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
            }
            LossKind::Triplet => {
                let groups: Vec<Vec<usize>> = set.by_class().into_values().collect();
                let p = self.cfg.sampler_writers.min(groups.len());
                let q = self.cfg.sampler_samples;
                let mut pools: Vec<Vec<usize>> = groups.clone();
                let mut cursors = vec![0usize; groups.len()];
                for pool in &mut pools {
                    pool.shuffle(&mut rng);
                }
                let mut classes: Vec<usize> = (0..groups.len()).collect();
                (0..self.steps_per_epoch(set.len()))
                    .map(|_| {
                        classes.shuffle(&mut rng);
                        let mut batch = Vec::with_capacity(p * q);
                        for &c in &classes[..p] {
                            for _ in 0..q {
                                if cursors[c] == pools[c].len() {
                                    pools[c].shuffle(&mut rng);
                                    cursors[c] = 0;
                                }
                                batch.push(pools[c][cursors[c]]);
                                cursors[c] += 1;
                            }
                        }
                        batch
                    })
                    .collect()
            }
        }
    }

    fn check_inputs<T: Scalar>(
        &self,
        model: &Model<T>,
        train: &LabeledImages<T>,
        val: Option<&LabeledImages<T>>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        model.check_input(train.images().shape())?;
        let sets = std::iter::once(train).chain(val);
        match self.cfg.loss_kind {
            LossKind::CrossEntropy => {
                let k = model.config().num_classes.ok_or_else(|| {
                    Error::config("cross-entropy training needs model.num_classes")
                })?;
                for set in sets {
                    if let Some(&l) = set.labels().iter().find(|&&l| l >= k) {
                        return Err(Error::config(format!(
                            "label {l} does not fit a classifier with {k} classes"
                        )));
                    }
                }
            }
            LossKind::Triplet => {
                if train.class_count() < 2 {
                    return Err(Error::config("triplet training needs at least two writers"));
                }
                if let Some(v) = val {
                    if v.class_count() < 2 {
                        return Err(Error::config("triplet validation needs at least two writers"));
                    }
                }
            }
        }
        if let Some(v) = val {
            model.check_input(v.images().shape())?;
        }
        Ok(())
    }

    /// Trains until `cfg.epochs` are done or `stop_after` epochs have been
    /// completed in total, whichever comes first.
    ///
    /// Each step and each validation pass is reported to `sink`. After every
    /// epoch the state's best model is replaced when the validation score
    /// improves: accuracy for cross-entropy, negative loss for triplets, and
    /// negative mean training loss when no validation set is given.
    pub fn run<T: Scalar>(
        &self,
        state: &mut TrainState<T>,
        train: &LabeledImages<T>,
        val: Option<&LabeledImages<T>>,
        stop_after: Option<usize>,
        sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        self.check_inputs(&state.model, train, val)?;
        let spe = self.steps_per_epoch(train.len());
        if state.step != state.epochs_done * spe {
            return Err(Error::config(format!(
                "resumed state is at step {} after {} epochs, expected {} steps per epoch",
                state.step, state.epochs_done, spe
            )));
        }
        let schedule = self.schedule(train.len());
        let end = stop_after.map_or(self.cfg.epochs, |s| s.min(self.cfg.epochs));
        for epoch in state.epochs_done..end {
            let mut dropout = epoch_rng(self.cfg.seed, epoch, DROPOUT_STREAM);
            let mut loss_sum = 0.0;
            let batches = self.epoch_batches(train, epoch);
            let mut last_lr = 0.0;
            for batch in &batches {
                let lr = schedule.at(state.step);
                last_lr = lr;
                let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
                let mut tape = Tape::new();
                let p = state.model.bind(&mut tape, true);
                let x = tape.constant(train.images().gather(batch)?);
                let loss = match self.cfg.loss_kind {
                    LossKind::CrossEntropy => {
                        let out = state.model.forward(&mut tape, &p, x, true, Some(&mut dropout))?;
                        tape.cross_entropy(out.logits.expect("requested"), &labels)?
                    }
                    LossKind::Triplet => {
                        let out = state.model.forward(&mut tape, &p, x, false, None)?;
                        let m = T::from_f64_lossy(self.cfg.triplet_margin);
                        tape.batch_hard_triplet(out.descriptor, &labels, m)?
                    }
                };
                let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(Error::data(format!(
                        "loss became non-finite at step {} (epoch {epoch})",
                        state.step
                    )));
                }
                let grads = p.gradients(&tape.backward(loss)?);
                drop(tape);
                self.adam
                    .step(state.model.params_mut(), &grads, &mut state.optimizer, lr)?;
                loss_sum += value;
                sink(&LogRecord {
                    epoch,
                    step: state.step,
                    lr,
                    loss: value,
                    split: "train".into(),
                    accuracy: None,
                })?;
                state.step += 1;
            }
            let score = match val {
                Some(v) => {
                    let (loss, accuracy) = self.validate(&state.model, v)?;
                    sink(&LogRecord {
                        epoch,
                        step: state.step,
                        lr: last_lr,
                        loss,
                        split: "val".into(),
                        accuracy,
                    })?;
                    accuracy.unwrap_or(-loss)
                }
                None => -loss_sum / batches.len() as f64,
            };
            state.epochs_done = epoch + 1;
            if state.best.as_ref().is_none_or(|b| score > b.score) {
                state.best = Some(BestModel {
                    epoch,
                    score,
                    params: state.model.params().clone(),
                });
            }
        }
        Ok(())
    }

    /// Validation loss, plus accuracy in cross-entropy mode.
    pub fn validate<T: Scalar>(&self, model: &Model<T>, set: &LabeledImages<T>) -> Result<(f64, Option<f64>)> {
        let mut tape = Tape::new();
        match self.cfg.loss_kind {
            LossKind::CrossEntropy => {
                let logits = model.logits_chunked(set.images(), self.eval_chunk)?;
                let acc = accuracy_of(&logits, set.labels());
                let l = tape.constant(logits);
                let loss = tape.cross_entropy(l, set.labels())?;
                Ok((tape.value(loss).item().to_f64().unwrap_or(f64::NAN), Some(acc)))
            }
            LossKind::Triplet => {
                let d = model.descriptors_chunked(set.images(), self.eval_chunk)?;
                let d = tape.constant(d);
                let m = T::from_f64_lossy(self.cfg.triplet_margin);
                let loss = tape.batch_hard_triplet(d, set.labels(), m)?;
                Ok((tape.value(loss).item().to_f64().unwrap_or(f64::NAN), None))
            }
        }
    }
}

/// Fraction of rows whose arg-max (first on ties) equals the label.
pub fn accuracy_of<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Evaluation-mode classification accuracy of `model` on `set`.
pub fn accuracy<T: Scalar>(model: &Model<T>, set: &LabeledImages<T>, chunk: usize) -> Result<f64> {
    let logits = model.logits_chunked(set.images(), chunk)?;
    Ok(accuracy_of(&logits, set.labels()))
}

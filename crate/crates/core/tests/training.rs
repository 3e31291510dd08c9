//! Loss oracles, schedule contract, resume and overfit checks for the training loop.

use std::path::Path;

use fragmix_core::data::{generate_synthetic_corpus, images_to_tensor, LabelIndex, SynthConfig};
use fragmix_core::numerics::Checkpoint;
use fragmix_core::preprocessing::PreprocessConfig;
use fragmix_core::training::{
    accuracy, batch_hard_triplet_loss, cross_entropy_loss, lr_at, LabeledImages, LogRecord, TrainState, Trainer,
};
use fragmix_core::{LossKind, Model, ModelConfig, Tape, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic_set(seed: u64) -> LabeledImages<f32> {
    let corpus = generate_synthetic_corpus(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let pre = PreprocessConfig {
        height: 32,
        width: 128,
        ..PreprocessConfig::default()
    };
    let images: Vec<_> = corpus.iter().map(|f| f.image.clone()).collect();
    let index = LabelIndex::new(corpus.iter().map(|f| f.record.writer_id.as_str()));
    let labels = corpus.iter().map(|f| index.get(&f.record.writer_id).unwrap()).collect();
    LabeledImages::new(images_to_tensor(&images, &pre).unwrap(), labels).unwrap()
}

fn tiny_model(classes: Option<usize>) -> ModelConfig {
    ModelConfig {
        input_height: 32,
        input_width: 128,
        backbone_stage_channels: vec![16, 32, 64],
        backbone_blocks_per_stage: vec![1, 1, 1],
        mixer_depth: 2,
        projection_channels: 32,
        projection_map_dim: 4,
        num_classes: classes,
        ..ModelConfig::default()
    }
}

/// A very small model and random images for contract tests that do not need learning.
fn micro(n: usize, classes: usize, seed: u64) -> (ModelConfig, LabeledImages<f64>) {
    let cfg = ModelConfig {
        input_height: 8,
        input_width: 8,
        backbone_stage_channels: vec![4],
        backbone_blocks_per_stage: vec![1],
        mixer_depth: 1,
        projection_channels: 4,
        projection_map_dim: 2,
        num_classes: Some(classes),
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[n, 3, 8, 8], 1.0, &mut rng);
    let labels = (0..n).map(|i| i % classes).collect();
    (cfg, LabeledImages::new(x, labels).unwrap())
}

fn run_logged<T: fragmix_core::Scalar>(
    trainer: &Trainer,
    state: &mut TrainState<T>,
    set: &LabeledImages<T>,
    stop_after: Option<usize>,
) -> Vec<LogRecord> {
    let mut log = Vec::new();
    trainer
        .run(state, set, None, stop_after, &mut |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
    log
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
    }
    sq.sqrt()
}

/// Scans every (anchor, positive, negative) triple and keeps, per anchor, the
/// largest hinge argument.
fn exhaustive_triplet(x: &[f64], dim: usize, labels: &[usize], margin: f64) -> Option<f64> {
    let n = labels.len();
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let v = distance(row(a), row(p)) - distance(row(a), row(q)) + margin;
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            anchors += 1;
            total += w.max(0.0);
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

#[test]
fn batch_hard_triplet_matches_exhaustive_oracle() {
    let margin = TrainConfig::default().triplet_margin;
    assert_eq!(margin, 0.15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let dim = rng.random_range(1..=8);
        let classes = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in x.chunks_mut(dim) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
        }
        let oracle = exhaustive_triplet(&x, dim, &labels, margin);
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::new(vec![n, dim], x).unwrap());
        match (batch_hard_triplet_loss(&mut tape, d, &labels, margin), oracle) {
            (Ok(l), Some(expected)) => {
                assert_eq!(tape.value(l).item(), expected);
                checked += 1;
            }
            (Err(_), None) => {}
            (got, want) => panic!("engine {got:?} vs oracle {want:?} for labels {labels:?}"),
        }
    }
    assert!(checked >= 90, "only {checked} batches had a valid anchor");
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::full(&[3, 4], 2.5));
    let l = cross_entropy_loss(&mut tape, uniform, &[0, 1, 3]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let peaked = tape.constant(Tensor::new(vec![1, 3], vec![10.0, 0.0, 0.0]).unwrap());
    let l = cross_entropy_loss(&mut tape, peaked, &[0]).unwrap();
    let p0 = 10f64.exp() / (10f64.exp() + 2.0);
    assert!((tape.value(l).item() + p0.ln()).abs() < 1e-15);
    assert!((tape.value(l).item() - 9.1e-5).abs() < 1e-6);
}

#[test]
fn lr_history_follows_the_schedule() {
    let (model_cfg, set) = micro(10, 2, 1);
    let cfg = TrainConfig {
        epochs: 5,
        lr: 1e-4,
        batch_size: 3,
        warmup_epochs: 2,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let mut state = TrainState::new(Model::new(model_cfg, 0).unwrap());
    let log = run_logged(&trainer, &mut state, &set, None);
    let steps: Vec<&LogRecord> = log.iter().filter(|r| r.split == "train").collect();
    let total = trainer.steps_per_epoch(set.len()) * cfg.epochs;
    assert_eq!(steps.len(), total);
    for (i, r) in steps.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.lr, lr_at(i, total, &cfg));
        assert!(r.loss >= 0.0);
    }
    let warmup_end = trainer.steps_per_epoch(set.len()) * cfg.warmup_epochs - 1;
    assert_eq!(steps[warmup_end].lr, 1e-4);
    assert_eq!(steps[total - 1].lr, 1e-5);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    for loss_kind in [LossKind::CrossEntropy, LossKind::Triplet] {
        let (model_cfg, set) = micro(12, 3, 2);
        let cfg = TrainConfig {
            epochs: 4,
            lr: 1e-3,
            batch_size: 5,
            loss_kind,
            sampler_writers: 2,
            sampler_samples: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(cfg.clone()).unwrap();
        let mut straight = TrainState::new(Model::<f64>::new(model_cfg.clone(), 3).unwrap());
        let full_log = run_logged(&trainer, &mut straight, &set, None);

        let mut first = TrainState::new(Model::<f64>::new(model_cfg, 3).unwrap());
        let mut log = run_logged(&trainer, &mut first, &set, Some(2));
        let bytes = first.to_checkpoint(&cfg).encode().unwrap();
        let ckpt = Checkpoint::decode(&bytes, Path::new("memory")).unwrap();
        let (mut resumed, restored_cfg) = TrainState::<f64>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(restored_cfg, cfg);
        assert_eq!(resumed.step, 2 * trainer.steps_per_epoch(set.len()));
        log.extend(run_logged(&Trainer::new(restored_cfg).unwrap(), &mut resumed, &set, None));

        assert_eq!(log, full_log, "{loss_kind}");
        assert_eq!(resumed, straight, "{loss_kind}");
    }
}

#[test]
fn degenerate_datasets_are_configuration_errors() {
    let (model_cfg, mixed) = micro(6, 2, 4);
    let set = LabeledImages::new(mixed.images().clone(), vec![0; 6]).unwrap();
    let model = Model::<f64>::new(model_cfg.clone(), 0).unwrap();
    let triplet = Trainer::new(TrainConfig {
        loss_kind: LossKind::Triplet,
        ..TrainConfig::default()
    })
    .unwrap();
    let err = triplet
        .run(&mut TrainState::new(model.clone()), &set, None, None, &mut |_| Ok(()))
        .unwrap_err();
    assert!(err.is_config(), "{err}");

    let empty = LabeledImages::new(Tensor::<f64>::zeros(&[0, 3, 8, 8]), vec![]).unwrap();
    for kind in [LossKind::CrossEntropy, LossKind::Triplet] {
        let trainer = Trainer::new(TrainConfig {
            loss_kind: kind,
            ..TrainConfig::default()
        })
        .unwrap();
        let err = trainer
            .run(&mut TrainState::new(model.clone()), &empty, None, None, &mut |_| Ok(()))
            .unwrap_err();
        assert!(err.is_config(), "{err}");
    }
}

#[test]
fn cross_entropy_overfits_synthetic_writers() {
    let set = synthetic_set(0);
    let cfg = TrainConfig {
        epochs: 20,
        lr: 2e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(cfg).unwrap();
    let mut state = TrainState::new(Model::new(tiny_model(Some(8)), 0).unwrap());
    let log = run_logged(&trainer, &mut state, &set, None);

    assert!(log.iter().all(|r| r.loss >= 0.0));
    let acc = accuracy(&state.model, &set, 32).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn full_batch_cross_entropy_moving_average_decreases() {
    let set = synthetic_set(0);
    let cfg = TrainConfig {
        epochs: 20,
        lr: 1e-3,
        batch_size: set.len(),
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        dropout_p: 0.0,
        ..tiny_model(Some(8))
    };
    let trainer = Trainer::new(cfg).unwrap();
    let mut state = TrainState::new(Model::new(model, 0).unwrap());
    let losses: Vec<f64> = run_logged(&trainer, &mut state, &set, None).iter().map(|r| r.loss).collect();
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, w) in avg.windows(2).enumerate() {
        assert!(w[1] <= w[0], "moving average rose at step {}: {avg:?}", i + 5);
    }
}

#[test]
fn triplet_overfits_synthetic_writers() {
    for seed in 0..3 {
        let set = synthetic_set(seed);
        let cfg = TrainConfig {
            epochs: 80,
            lr: 1e-3,
            loss_kind: LossKind::Triplet,
            seed,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(cfg).unwrap();
        let mut state = TrainState::new(Model::new(tiny_model(None), seed).unwrap());
        let log = run_logged(&trainer, &mut state, &set, None);
        assert!(log.iter().all(|r| r.loss >= 0.0));
        let last: Vec<f64> = log.iter().filter(|r| r.epoch == 79).map(|r| r.loss).collect();
        let mean = last.iter().sum::<f64>() / last.len() as f64;
        assert!(mean < 0.05, "seed {seed}: final epoch loss {mean}");
        let (whole, _) = trainer.validate(&state.model, &set).unwrap();
        assert!(whole < 0.05, "seed {seed}: full-set batch-hard loss {whole}");
    }
}

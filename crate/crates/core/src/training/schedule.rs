//! Linear warmup followed by cosine annealing.

use std::f64::consts::PI;

use super::TrainConfig;

/// Step-indexed learning rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            lr: cfg.lr,
            final_lr: cfg.lr * cfg.final_lr_fraction,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    /// Learning rate used for optimizer step `step` (0-based).
    ///
    /// Warmup rises linearly as `lr·(step+1)/W` and reaches `lr` exactly at
    /// step `W−1`. From there a half cosine decays to `final_lr`, which is
    /// returned exactly at step `total_steps−1`.
    pub fn at(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step + 1 < w {
            return self.lr * (step + 1) as f64 / w as f64;
        }
        let start = w.saturating_sub(1);
        let last = self.total_steps.saturating_sub(1);
        if last <= start {
            return self.lr;
        }
        let t = ((step - start) as f64 / (last - start) as f64).min(1.0);
        let weight = 0.5 * (1.0 + (PI * t).cos());
        self.lr * weight + self.final_lr * (1.0 - weight)
    }
}

/// Learning rate at `step` of a run with `total_steps` steps.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let steps_per_epoch = (total_steps / cfg.epochs.max(1)).max(1);
    Schedule {
        total_steps,
        ..Schedule::new(cfg, steps_per_epoch)
    }
    .at(step)
}

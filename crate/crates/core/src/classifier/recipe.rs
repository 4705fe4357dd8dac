use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimisation hyper-parameters of the classification recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub init_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub label_smoothing: f64,
    /// `0` disables MixUp.
    pub mixup_alpha: f64,
    pub ema_decay: f64,
    pub grad_clip_norm: f64,
    pub stochastic_depth: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            peak_lr: 3e-3,
            min_lr: 5e-6,
            init_lr: 5e-7,
            warmup_epochs: 20,
            epochs: 300,
            batch_size: 4096,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            ema_decay: 0.9999,
            grad_clip_norm: 1.0,
            stochastic_depth: 0.3,
        }
    }
}

impl TrainRecipe {
    /// Desk-scale version: same shape of schedule and regularisers, fewer
    /// epochs, small batches and an EMA horizon matched to the run length.
    pub fn toy() -> TrainRecipe {
        TrainRecipe {
            warmup_epochs: 2,
            epochs: 30,
            batch_size: 16,
            ema_decay: 0.9,
            stochastic_depth: 0.0,
            ..TrainRecipe::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train recipe: {m}")));
        if !(self.min_lr < self.peak_lr) {
            return bad("min_lr must be below peak_lr");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if self.mixup_alpha < 0.0 {
            return bad("mixup_alpha must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup longer than the run");
        }
        Ok(())
    }

    /// Linear warmup from `init_lr` to `peak_lr`, then cosine decay to
    /// `min_lr` at the last step of the run.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.init_lr + (self.peak_lr - self.init_lr) * step as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm + 1);
        if span == 0 {
            return self.peak_lr;
        }
        let p = ((step - warm) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

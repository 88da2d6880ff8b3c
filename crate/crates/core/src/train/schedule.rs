use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// KL-weight schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    /// Linear from `beta_start` to `beta_end` over `beta_warmup_epochs`.
    Warmup,
    /// `beta_end` from the first step.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_warmup_epochs: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_warmup_epochs: f64,
    pub beta_mode: BetaMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Training sequences used for the per-epoch train ELBO (0: none).
    pub eval_train_sequences: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr_start: 2e-5,
            lr_end: 1.6e-4,
            lr_warmup_epochs: 5.0,
            beta_start: 0.0,
            beta_end: 1.0,
            beta_warmup_epochs: 10.0,
            beta_mode: BetaMode::Warmup,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 100.0,
            batch_size: 16,
            epochs: 30,
            checkpoint_every: 5,
            eval_train_sequences: 256,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("train.{name}"), format!("must be finite and >= 0, got {v}")))
            }
        };
        for (n, v) in [
            ("lr_warmup_epochs", self.lr_warmup_epochs),
            ("beta_start", self.beta_start),
            ("beta_warmup_epochs", self.beta_warmup_epochs),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            nonneg(n, v)?;
        }
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_end && self.lr_end.is_finite()) {
            return Err(Error::config("train.lr_start", format!("need 0 < lr_start <= lr_end, got {} and {}", self.lr_start, self.lr_end)));
        }
        if !(self.beta_start <= self.beta_end && self.beta_end.is_finite()) {
            return Err(Error::config("train.beta_end", "need beta_start <= beta_end"));
        }
        for (n, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("train.{n}"), format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear warmup, then constant.
pub fn lr_at(step: u64, steps_per_epoch: usize, s: &TrainSchedule) -> f64 {
    let warm = s.lr_warmup_epochs * steps_per_epoch as f64;
    if warm <= 0.0 || step as f64 >= warm {
        return s.lr_end;
    }
    s.lr_start + (s.lr_end - s.lr_start) * step as f64 / warm
}

/// KL weight for an epoch.
pub fn beta_at(epoch: usize, s: &TrainSchedule) -> f64 {
    match s.beta_mode {
        BetaMode::Naive => s.beta_end,
        BetaMode::Warmup if s.beta_warmup_epochs <= 0.0 || epoch as f64 >= s.beta_warmup_epochs => s.beta_end,
        BetaMode::Warmup => s.beta_start + (s.beta_end - s.beta_start) * epoch as f64 / s.beta_warmup_epochs,
    }
}

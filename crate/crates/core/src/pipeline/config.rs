use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::AdamWConfig;

/// Batch size at which `base_lr` applies unscaled.
pub const LR_REFERENCE_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate per 256 samples; the effective rate scales linearly
    /// with `batch_size`.
    pub base_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub cond_dropout: f64,
    pub crops_per_image: usize,
    pub seed: u64,
    /// Stop once the mean loss over the last `early_stop_window` steps is at
    /// or below this value.
    pub early_stop_loss: Option<f64>,
    pub early_stop_window: usize,
    /// Metrics row every `log_every` steps (and on the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            batch_size: 256,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            grad_clip: Some(1.0),
            cond_dropout: 0.1,
            crops_per_image: 10,
            seed: 0,
            early_stop_loss: None,
            early_stop_window: 20,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// Tokenizer settings at the reference scale.
    pub fn tokenizer_reference() -> Self {
        // 1e-4 at batch 128.
        Self { base_lr: 2e-4, batch_size: 128, ..Self::default() }
    }

    pub fn tokenizer_desk() -> Self {
        Self {
            base_lr: 0.064,
            batch_size: 8,
            steps: 3000,
            weight_decay: 0.0,
            log_every: 50,
            ..Self::default()
        }
    }

    pub fn ar_desk() -> Self {
        Self {
            base_lr: 0.064,
            batch_size: 8,
            steps: 10_000,
            log_every: 50,
            ..Self::default()
        }
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH as f64
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr > 0.0 && self.base_lr.is_finite(), Config, "learning rate must be positive");
        ensure!(self.batch_size > 0, Config, "batch size must be positive");
        ensure!(self.crops_per_image >= 1, Config, "crops_per_image must be >= 1");
        ensure!((0.0..1.0).contains(&self.cond_dropout), Config, "cond_dropout must be in [0, 1)");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "Adam betas must be in [0, 1)"
        );
        ensure!(self.weight_decay >= 0.0, Config, "weight decay must be >= 0");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        ensure!(self.log_every > 0 && self.early_stop_window > 0, Config, "log interval and window must be positive");
        Ok(())
    }
}

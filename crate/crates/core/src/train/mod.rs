//! Optimization loops: pre-training, finetuning, per-layer linear probing,
//! epoch budgets and the learning-rate schedule.

mod loops;
mod optim;
mod schedule;

pub use loops::{
    accuracy, finetune, pretrain, probe, FinetuneReport, Observer, PretrainSummary, ProbeResult, StepMetrics,
};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{
    cosine_lr, epoch_budget, epoch_budget_for_fraction, preset, round_epochs, EpochPreset, EPOCH_PRESETS,
    IMAGENET_EPOCHS, IMAGENET_TRAIN_SIZE, SMALL_DATASET_CAP,
};

use crate::data::AugmentPolicy;
use crate::error::{bail, Result};
use crate::losses::LossWeights;
use crate::masking::MaskingConfig;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimConfig {
    /// Peak learning rate; when absent, `base_lr · batch / 256`.
    pub lr: Option<f64>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length as a fraction of all steps, unless `warmup_steps` is set.
    pub warmup_fraction: f64,
    pub warmup_steps: Option<usize>,
    pub lr_floor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: None,
            base_lr: 1.5e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.05,
            warmup_steps: None,
            lr_floor: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn peak_lr(&self, batch_size: usize) -> f64 {
        self.lr.unwrap_or(self.base_lr * batch_size as f64 / 256.0)
    }

    pub fn warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| libm::round(self.warmup_fraction * total_steps as f64) as usize)
            .min(total_steps)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.lr {
            if !(lr >= 0.0) {
                bail!(Config, "learning rate must be non-negative, got {}", lr);
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "betas must be in [0, 1), got ({}, {})", self.beta1, self.beta2);
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            bail!(Config, "warmup_fraction in [0, 1], weight_decay ≥ 0 and eps > 0 required");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub masking: MaskingConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            masking: MaskingConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            augment: AugmentPolicy::Basic,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Total optimizer steps: `epochs · ⌈dataset / batch⌉`.
pub fn total_steps(dataset_size: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * dataset_size.div_ceil(batch_size)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    pub label_smoothing: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            optim: OptimConfig {
                base_lr: 1e-3,
                ..OptimConfig::default()
            },
            augment: AugmentPolicy::Basic,
            seed: 0,
            eval_every: 1,
            label_smoothing: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Encoder layers to probe; empty means every layer `0..=depth`.
    pub layers: alloc::vec::Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            optim: OptimConfig {
                lr: Some(1e-2),
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
            seed: 0,
            layers: alloc::vec::Vec::new(),
        }
    }
}

//! Training configuration, read from TOML with every default pre-filled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::masking::DEFAULT_MASK_RATIO;
use crate::objectives::silence::{DEFAULT_ALPHA_S, DEFAULT_THRESHOLD_DB};
use crate::objectives::vq::{CODEBOOK_SIZE, DEFAULT_DECAY, DEFAULT_LAPLACE_EPSILON};
use crate::objectives::SslWeights;
use crate::phonemap::UnknownSymbols;

/// One-cycle learning-rate and momentum schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Fraction of the steps spent raising the learning rate.
    pub warmup_fraction: f64,
    /// Peak over initial learning rate.
    pub div_factor: f64,
    /// Initial over final learning rate.
    pub final_div_factor: f64,
    /// First-moment decay at the learning-rate peak.
    pub momentum_min: f64,
    /// First-moment decay at the start and end of the cycle.
    pub momentum_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.15,
            div_factor: 25.0,
            final_div_factor: 1e4,
            momentum_min: 0.8,
            momentum_max: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta2: 0.999, eps: 1e-8 }
    }
}

/// Self-supervised pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Peak rate of the feature extractor, transformer and mask embedding.
    pub lr_encoder: f64,
    pub lr_quantizer: f64,
    /// Peak rate of the projection head.
    pub lr_head: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub codebook_size: usize,
    pub codebook_decay: f64,
    pub laplace_epsilon: f64,
    pub loss: SslWeights,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 5e-4,
            lr_quantizer: 1e-3,
            lr_head: 1.5e-3,
            weight_decay: 0.05,
            mask_ratio: DEFAULT_MASK_RATIO,
            codebook_size: CODEBOOK_SIZE,
            codebook_decay: DEFAULT_DECAY,
            laplace_epsilon: DEFAULT_LAPLACE_EPSILON,
            loss: SslWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Fine-tuning learning rate as a fraction of the supervised rate.
    pub lr_scale: f64,
    pub freeze_features: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_scale: 0.1,
            freeze_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Utterances per step.
    pub batch_size: usize,
    /// Peak supervised learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold.
    pub grad_clip: f64,
    /// Weight of the silence term next to CTC.
    pub alpha_s: f64,
    pub silence_threshold_db: f64,
    /// Steps between validation passes; 0 validates only at the end.
    pub validate_every: usize,
    /// Stop once validation PER falls below this.
    pub early_stop_per: Option<f64>,
    pub unknown_symbols: UnknownSymbols,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            alpha_s: DEFAULT_ALPHA_S,
            silence_threshold_db: DEFAULT_THRESHOLD_DB,
            validate_every: 200,
            early_stop_per: None,
            unknown_symbols: UnknownSymbols::Strict,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized model for a corpus of `num_classes` classes.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            model: ModelConfig::desk(num_classes),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        let s = &self.schedule;
        if !(s.warmup_fraction > 0.0 && s.warmup_fraction < 1.0) {
            return bad("schedule.warmup_fraction must lie in (0, 1)");
        }
        if !(s.div_factor >= 1.0 && s.final_div_factor >= 1.0) {
            return bad("schedule divisors must be at least 1");
        }
        if !(0.0 <= s.momentum_min && s.momentum_min <= s.momentum_max && s.momentum_max < 1.0) {
            return bad("schedule momentum range must satisfy 0 <= min <= max < 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        let p = &self.pretrain;
        for (name, lr) in [
            ("lr", self.lr),
            ("pretrain.lr_encoder", p.lr_encoder),
            ("pretrain.lr_quantizer", p.lr_quantizer),
            ("pretrain.lr_head", p.lr_head),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0 && p.weight_decay >= 0.0 && self.alpha_s >= 0.0) {
            return bad("weight decay and alpha_s must be non-negative");
        }
        if !(self.adam.beta2 > 0.0 && self.adam.beta2 < 1.0 && self.adam.eps > 0.0) {
            return bad("adam.beta2 must lie in (0, 1) and adam.eps be positive");
        }
        if !(0.0..=1.0).contains(&p.codebook_decay) || p.codebook_size == 0 {
            return bad("pretrain.codebook_decay must lie in [0, 1] with a non-empty codebook");
        }
        if !(self.finetune.lr_scale > 0.0) {
            return bad("finetune.lr_scale must be positive");
        }
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_override() {
        let cfg = TrainConfig::desk(8);
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("steps = 10\n[pretrain]\nlr_head = 0.002\n").unwrap();
        assert_eq!(partial.steps, 10);
        assert_eq!(partial.pretrain.lr_head, 0.002);
        assert_eq!(partial.pretrain.lr_encoder, 5e-4);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("grad_clip = 0.0").is_err());
        assert!(TrainConfig::from_toml("[schedule]\nwarmup_fraction = 1.0").is_err());
        assert!(TrainConfig::from_toml("nonsense = 1").is_err());
    }
}

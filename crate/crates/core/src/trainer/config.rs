use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SamMixE2e,
    SamPpTwoStage,
    ClsOnly,
}

impl TrainMode {
    /// Row label prefix used in reports.
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::SamMixE2e => "SAM-Mix",
            TrainMode::SamPpTwoStage => "SAM-PP",
            TrainMode::ClsOnly => "CLS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    CosineWarmRestart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub n_labeled: usize,
    pub epochs: usize,
    /// Segmenter epochs of the two-stage protocol; `None` reuses `epochs`.
    pub stage2_epochs: Option<usize>,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,
    pub restart_period: usize,
    pub batch_size: usize,
    pub lambda_seg: f64,
    /// Weight of the squared error between predicted mask scores and the
    /// realised hard Dice of each mask.
    pub score_loss_weight: f64,
    /// Weight of the displaced-prompt term: each gated sample is also
    /// decoded with its box moved off the organ, against an empty target.
    pub displaced_box_weight: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Seeds of the repeated-runs harness.
    pub seeds: Vec<u64>,
    /// Substitute the ground-truth bounding box when a labeled sample yields
    /// no CAM box.
    pub gt_box_fallback: bool,
    pub single_threaded: bool,
    pub freeze_prompt_encoder: bool,
    pub freeze_decoder: bool,
    /// Run validation every epoch and keep the best checkpoint.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::SamMixE2e,
            n_labeled: 50,
            epochs: 10,
            stage2_epochs: None,
            lr: 0.001,
            lr_min: 0.0,
            lr_schedule: LrSchedule::Constant,
            restart_period: 10,
            batch_size: 30,
            lambda_seg: 1.0,
            score_loss_weight: 1.0,
            displaced_box_weight: 0.5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            gt_box_fallback: true,
            single_threaded: true,
            freeze_prompt_encoder: false,
            freeze_decoder: false,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            bail!(Config, "epochs must be >= 1");
        }
        if self.stage2_epochs == Some(0) {
            bail!(Config, "stage2_epochs must be >= 1 when set");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            bail!(Config, "lr_min must lie in [0, lr]");
        }
        if self.lambda_seg < 0.0 || !self.lambda_seg.is_finite() {
            bail!(Config, "lambda_seg must be >= 0, got {}", self.lambda_seg);
        }
        if self.batch_size < 1 || self.restart_period < 1 {
            bail!(Config, "batch_size and restart_period must be >= 1");
        }
        if self.score_loss_weight < 0.0 || self.weight_decay < 0.0 || self.displaced_box_weight < 0.0 {
            bail!(Config, "score_loss_weight, displaced_box_weight and weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            bail!(Config, "invalid optimizer moments configuration");
        }
        Ok(())
    }

    pub fn stage2_epochs(&self) -> usize {
        self.stage2_epochs.unwrap_or(self.epochs)
    }
}

/// Learning rate at a (fractional) epoch. The cosine schedule restarts every
/// `restart_period` epochs.
pub fn lr_at(epoch_fraction: f64, cfg: &TrainConfig) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::CosineWarmRestart => {
            let period = cfg.restart_period as f64;
            let mut t = epoch_fraction.max(0.0) % period;
            // the closing point of a cycle belongs to that cycle
            if t == 0.0 && epoch_fraction > 0.0 {
                t = period;
            }
            cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (PI * t / period).cos())
        }
    }
}

/// Inference-time options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Decode each box separately and take the union, instead of one joint
    /// decode over all boxes.
    pub per_box_decode: bool,
    pub mask_threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            per_box_decode: false,
            mask_threshold: 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine() -> TrainConfig {
        TrainConfig {
            lr: 0.001,
            lr_min: 1e-5,
            lr_schedule: LrSchedule::CosineWarmRestart,
            restart_period: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let c = cosine();
        assert_eq!(lr_at(0.0, &c), 0.001);
        assert!((lr_at(10.0, &c) - 1e-5).abs() < 1e-15);
        assert!((lr_at(5.0, &c) - (0.001 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((lr_at(10.5, &c) - lr_at(0.5, &c)).abs() < 1e-15);
    }

    #[test]
    fn defaults_and_preconditions() {
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.batch_size, d.epochs), (0.001, 30, 10));
        assert_eq!(lr_at(3.7, &d), 0.001);
        assert!(TrainConfig { epochs: 0, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { lambda_seg: -1.0, ..d.clone() }.validate().is_err());
        assert!(d.validate().is_ok());
    }
}

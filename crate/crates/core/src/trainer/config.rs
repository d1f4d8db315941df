use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::adversary::DiscConfig;
use crate::objectives::LossWeights;
use crate::restormer::ModelConfig;
use crate::sfi_stft::is_supported_rate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub lr: f64,
    pub gen_betas: [f64; 2],
    pub disc_betas: [f64; 2],
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    pub decay_every: u64,
    /// Step after which decay starts; `None` takes the stage default.
    pub decay_after: Option<u64>,
    pub disc_steps_per_gen: usize,
    /// Output rates drawn from at every step.
    pub target_rates: Vec<u32>,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub disc: DiscConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: tiny model, short segments.
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            steps: 1000,
            segment_seconds: 1.0,
            checkpoint_every: 250,
            ..Self::full_scale(Stage::Pretrain)
        }
    }
}

impl TrainConfig {
    /// Full-scale optimization settings for `stage`. Not runnable at desk scale.
    pub fn full_scale(stage: Stage) -> Self {
        Self {
            stage,
            steps: 200_000,
            batch_size: 2,
            segment_seconds: 3.0,
            lr: 2e-4,
            gen_betas: [0.9, 0.995],
            disc_betas: [0.8, 0.999],
            weight_decay: 0.01,
            warmup_steps: 5000,
            decay_factor: 0.9,
            decay_every: 10_000,
            decay_after: None,
            disc_steps_per_gen: 2,
            target_rates: vec![16_000, 24_000, 44_100, 48_000],
            grad_clip: 5.0,
            seed: 0,
            checkpoint_every: 10_000,
            model: ModelConfig::full_offline(),
            disc: DiscConfig::default(),
            loss: LossWeights::default(),
        }
    }

    pub fn decay_threshold(&self) -> u64 {
        self.decay_after.unwrap_or(match self.stage {
            Stage::Pretrain => 100_000,
            Stage::Adversarial => 10_000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.segment_seconds > 0.0) {
            return bad(format!("segment_seconds {} must be positive", self.segment_seconds));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and nonnegative", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} must lie in (0, 1]", self.decay_factor));
        }
        if self.decay_every == 0 || self.checkpoint_every == 0 {
            return bad("decay_every and checkpoint_every must be positive".into());
        }
        for b in self.gen_betas.iter().chain(&self.disc_betas) {
            if !(0.0..1.0).contains(b) {
                return bad(format!("beta {b} must lie in [0, 1)"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        if self.target_rates.is_empty() {
            return bad("target_rates is empty".into());
        }
        if let Some(r) = self.target_rates.iter().find(|r| !is_supported_rate(**r)) {
            return bad(format!("target rate {r} Hz is not on the grid"));
        }
        if self.stage == Stage::Adversarial && self.disc_steps_per_gen == 0 {
            return bad("disc_steps_per_gen must be positive in the adversarial stage".into());
        }
        self.model.validate()?;
        self.disc.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Learning rate for update number `step`: linear warm-up from zero, then
/// step decay by `decay_factor` every `decay_every` steps past the threshold.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let warm = if step < cfg.warmup_steps { step as f64 / cfg.warmup_steps as f64 } else { 1.0 };
    let k = step.saturating_sub(cfg.decay_threshold()) / cfg.decay_every;
    cfg.lr * warm * cfg.decay_factor.powi(k.min(i32::MAX as u64) as i32)
}

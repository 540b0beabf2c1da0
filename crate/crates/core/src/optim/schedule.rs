use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub clip_after_warmup_only: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
            peak_lr: 4e-4,
            min_lr: 4e-5,
            warmup_steps: 2500,
            total_steps: 100_000,
            clip_norm: 1.0,
            clip_after_warmup_only: true,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f32| b > 0.0 && b < 1.0;
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2)));
        }
        if self.min_lr > self.peak_lr || self.min_lr < 0.0 {
            return Err(Error::Config(format!(
                "min_lr {} must be in [0, peak_lr {}]",
                self.min_lr, self.peak_lr
            )));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} shorter than warmup {}",
                self.total_steps, self.warmup_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from zero, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at_step(step: u64, cfg: &AdamWConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Multiplier applied to every gradient given the global norm.
pub fn clip_scale(global_norm: f64, cfg: &AdamWConfig, step: u64) -> f64 {
    if cfg.clip_after_warmup_only && step < cfg.warmup_steps {
        return 1.0;
    }
    if cfg.clip_norm <= 0.0 || global_norm <= cfg.clip_norm {
        1.0
    } else {
        cfg.clip_norm / global_norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = AdamWConfig::default();
        assert_eq!(lr_at_step(0, &cfg), 0.0);
        assert!((lr_at_step(2500, &cfg) - 4e-4).abs() < 1e-18);
        assert!((lr_at_step(cfg.total_steps, &cfg) - 4e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(cfg.total_steps + 10, &cfg), 4e-5);
        let before = lr_at_step(2499, &cfg);
        assert!((lr_at_step(2500, &cfg) - before - 4e-4 / 2500.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_rules() {
        let cfg = AdamWConfig::default();
        assert_eq!(clip_scale(0.5, &cfg, 3000), 1.0);
        assert_eq!(clip_scale(4.0, &cfg, 3000), 0.25);
        assert_eq!(clip_scale(4.0, &cfg, 100), 1.0);
    }

    #[test]
    fn validation() {
        let cfg = AdamWConfig {
            min_lr: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AdamWConfig::default().validate().is_ok());
    }
}

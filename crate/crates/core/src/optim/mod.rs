//! AdamW, gradient clipping policies and the learning-rate schedule.

mod adamw;
mod clip;
mod lr;

use serde::{Deserialize, Serialize};

pub use adamw::{AdamW, AdamWHyper, Moments};
pub use clip::{
    clip_gradients, clip_in_place, ClipPolicy, ClipReport, GradMap, NormPair, ZERO_NORM_GUARD,
};
pub use lr::{lr_at, warmup_steps};

use crate::error::{Error, Result};

/// Optimizer hyperparameters plus the warmup share of the step budget, as
/// they appear in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::from_hyper(AdamWHyper::default(), 0.1)
    }
}

impl OptimConfig {
    pub fn from_hyper(h: AdamWHyper, warmup_fraction: f64) -> Self {
        OptimConfig {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            bias_correction: h.bias_correction,
            warmup_fraction,
        }
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            bias_correction: self.bias_correction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

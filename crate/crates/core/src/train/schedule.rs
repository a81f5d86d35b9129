use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_init: 1e-3,
            lr_final: 1e-5,
            warmup_epochs: 10.0,
            total_epochs: 200.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init >= 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_init) {
            return Err(Error::Config(format!(
                "schedule needs 0 <= lr_final <= lr_init, got {} and {}",
                self.lr_final, self.lr_init
            )));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(Error::Config(format!(
                "schedule needs 0 <= warmup_epochs < total_epochs, got {} and {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch in `[0, total_epochs]`.
pub fn lr_at(s: &ScheduleConfig, epoch: f64) -> Result<f64> {
    s.validate()?;
    if !(0.0..=s.total_epochs).contains(&epoch) {
        return Err(Error::invalid(
            "lr_at",
            format!("epoch {epoch} outside [0, {}]", s.total_epochs),
        ));
    }
    if epoch <= s.warmup_epochs && s.warmup_epochs > 0.0 {
        return Ok(s.lr_init * (epoch / s.warmup_epochs));
    }
    let progress = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs);
    let delta = s.lr_init - s.lr_final;
    Ok(s.lr_final + 0.5 * delta * (1.0 + (std::f64::consts::PI * progress).cos()))
}

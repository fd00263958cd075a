//! Exponential ramp-up of the coherence weight and plateau learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RampSchedule {
    /// Length in epochs; `None` means half of the configured epochs.
    pub ramp_length: Option<usize>,
    pub w_max: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule {
            ramp_length: None,
            w_max: 1.0,
        }
    }
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_length == Some(0) {
            return Err(Error::Config("ramp_length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.w_max) {
            return Err(Error::Config(format!("w_max must lie in [0, 1], got {}", self.w_max)));
        }
        Ok(())
    }

    pub fn length(&self, epochs: usize) -> usize {
        self.ramp_length.unwrap_or(epochs / 2).max(1)
    }
}

/// `w_max · exp(−5 (1 − t/L)²)` for `t < L`, `w_max` afterwards.
pub fn rampup_w(t: usize, ramp_length: usize, w_max: f64) -> f64 {
    let l = ramp_length.max(1);
    if t >= l {
        return w_max;
    }
    let x = 1.0 - t as f64 / l as f64;
    w_max * (-5.0 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauPolicy {
    pub decay_factor: f64,
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for PlateauPolicy {
    fn default() -> Self {
        PlateauPolicy {
            decay_factor: 0.1,
            patience: 5,
            tolerance: 1e-8,
        }
    }
}

impl PlateauPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Epoch indices (into `history`) after which the policy decays the rate.
/// Each decay restarts the patience count.
pub fn plateau_decays(history: &[f64], policy: &PlateauPolicy) -> Vec<usize> {
    let p = policy.patience;
    let mut last = 0;
    let mut decays = Vec::new();
    for len in 1..=history.len() {
        if len <= p || len - last < p {
            continue;
        }
        let recent = history[len - p..len].iter().copied().fold(f64::INFINITY, f64::min);
        let before = history[..len - p].iter().copied().fold(f64::INFINITY, f64::min);
        if recent >= before - policy.tolerance {
            decays.push(len - 1);
            last = len;
        }
    }
    decays
}

/// Learning rate after observing `history` (per-epoch training losses).
pub fn plateau_step(history: &[f64], lr: f64, policy: &PlateauPolicy) -> f64 {
    match history.len().checked_sub(1) {
        Some(i) if plateau_decays(history, policy).last() == Some(&i) => lr * policy.decay_factor,
        _ => lr,
    }
}

//! Loss-driven learning-rate control.
//!
//! Multiplicative increase while the federated loss keeps falling,
//! multiplicative decrease otherwise, clamped to `[eta_min, eta_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kappa_up: f64,
    pub kappa_down: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kappa_up: 1.05,
            kappa_down: 0.7,
            eta_min: 1e-4,
            eta_max: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_up > 1.0 && self.kappa_up.is_finite()) {
            return Err(Error::invalid("controller.kappa_up", "must be greater than 1"));
        }
        if !(self.kappa_down > 0.0 && self.kappa_down < 1.0) {
            return Err(Error::invalid("controller.kappa_down", "must lie in (0, 1)"));
        }
        if !(self.eta_min > 0.0 && self.eta_min.is_finite()) {
            return Err(Error::invalid("controller.eta_min", "must be positive"));
        }
        if !(self.eta_max >= self.eta_min && self.eta_max.is_finite()) {
            return Err(Error::invalid(
                "controller.eta_max",
                "must be finite and at least eta_min",
            ));
        }
        Ok(())
    }
}

/// Loss reduction across a round; positive means the loss went down.
pub fn compute_delta_loss(loss_before: f64, loss_after: f64) -> Result<f64> {
    if !loss_before.is_finite() || !loss_after.is_finite() {
        return Err(Error::NonFinite("round loss"));
    }
    Ok(loss_before - loss_after)
}

/// Next learning rate. A zero `delta_loss` counts as no improvement.
pub fn update_lr(eta: f64, delta_loss: f64, cfg: &ControllerConfig) -> f64 {
    if delta_loss > 0.0 {
        (eta * cfg.kappa_up).min(cfg.eta_max)
    } else {
        (eta * cfg.kappa_down).max(cfg.eta_min)
    }
}

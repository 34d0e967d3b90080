use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward Ornstein-Uhlenbeck schedule with unit diffusion coefficient,
/// together with the early-stopping time and the backward step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSchedule {
    /// Terminal time `T`.
    pub t_end: f64,
    /// Early-stopping time `t0`.
    pub t0: f64,
    /// Backward step size.
    pub eta: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { t_end: 10.0, t0: 0.01, eta: 0.005 }
    }
}

/// `exp(-t/2)`, the signal coefficient of the forward kernel.
#[inline]
pub fn alpha(t: f64) -> f64 {
    (-0.5 * t).exp()
}

/// `1 - exp(-t)`, the variance of the forward kernel.
#[inline]
pub fn h(t: f64) -> f64 {
    -(-t).exp_m1()
}

impl DiffusionSchedule {
    pub fn new(t_end: f64, t0: f64, eta: f64) -> Result<Self> {
        let s = Self { t_end, t0, eta };
        s.validate()?;
        Ok(s)
    }

    /// `T = t0` is accepted as the degenerate zero-step schedule.
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0) {
            return Err(Error::Domain(format!("early-stopping time must be > 0, got {}", self.t0)));
        }
        if !(self.t0 <= self.t_end) || !self.t_end.is_finite() {
            return Err(Error::Validation(format!(
                "need t0 <= T, got t0={}, T={}",
                self.t0, self.t_end
            )));
        }
        if !(self.eta > 0.0 && self.eta <= self.t0) {
            return Err(Error::Validation(format!(
                "step size must satisfy 0 < eta <= t0, got eta={}, t0={}",
                self.eta, self.t0
            )));
        }
        Ok(())
    }

    /// Backward step lengths, in order. Full steps of `eta` followed by one
    /// partial step when `T - t0` is not a multiple of `eta`.
    pub fn step_sizes(&self) -> Vec<f64> {
        let span = self.t_end - self.t0;
        let ratio = span / self.eta;
        let full = (ratio + 1e-9).floor() as usize;
        let mut steps = vec![self.eta; full];
        let rest = span - full as f64 * self.eta;
        if rest > 1e-12 * self.t_end.max(1.0) {
            steps.push(rest);
        }
        steps
    }
}

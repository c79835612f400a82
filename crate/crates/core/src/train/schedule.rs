//! Learning-rate schedules.
//!
//! The global rate decays exponentially, `η_g(t) = c_g · 10^(−t/T_g)`.
//! Projection matrices use `η_g(t) · η_p(t)` where the multiplier either
//! ramps up as `η_p(t) = c_p^(1 − min(t/T_p, 1))` (reaching 1 at `T_p`) or
//! stays constant.
//!
//! `t` is measured in schedule units: `step / steps_per_unit`.

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ProjSchedule {
    /// Projection matrices use the global rate.
    None,
    Scheduled {
        c_p: f64,
        t_p: f64,
    },
    Constant {
        c: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrConfig {
    pub c_g: f64,
    pub t_g: f64,
    pub proj: ProjSchedule,
    pub steps_per_unit: f64,
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.c_g) || !positive(self.t_g) {
            return Err(Error::invalid("c_g and t_g must be positive"));
        }
        if !positive(self.steps_per_unit) {
            return Err(Error::invalid("steps_per_unit must be positive"));
        }
        match self.proj {
            ProjSchedule::None => Ok(()),
            ProjSchedule::Scheduled { c_p, t_p } if positive(c_p) && positive(t_p) => Ok(()),
            ProjSchedule::Constant { c } if positive(c) => Ok(()),
            _ => Err(Error::invalid(
                "projection schedule constants must be positive",
            )),
        }
    }

    pub fn schedule_time(&self, step: usize) -> f64 {
        step as f64 / self.steps_per_unit
    }
}

pub fn lr_global(t: f64, cfg: &LrConfig) -> f64 {
    cfg.c_g * math::pow(10.0, -t / cfg.t_g)
}

pub fn lr_proj_multiplier(t: f64, cfg: &LrConfig) -> f64 {
    match cfg.proj {
        ProjSchedule::None => 1.0,
        ProjSchedule::Scheduled { c_p, t_p } => math::pow(c_p, 1.0 - f64::min(t / t_p, 1.0)),
        ProjSchedule::Constant { c } => c,
    }
}

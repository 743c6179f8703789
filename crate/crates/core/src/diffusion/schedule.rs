use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Total DDIM steps used throughout.
pub const DEFAULT_T_TOTAL: usize = 50;
/// Step at which the reference view is drag-edited.
pub const DEFAULT_T_E: usize = 35;
/// Step at which latents are re-inverted and optimized across views.
pub const DEFAULT_T_R: usize = 20;

/// Linear-beta noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
    t_e: usize,
    t_r: usize,
}

/// Step reached by inverting a fraction `eta` of the schedule:
/// `round(eta * t_total)`.
pub fn step_for_strength(eta: f64, t_total: usize) -> usize {
    math::round(eta * t_total as f64) as usize
}

/// `alpha_bar[k] = Π_{u ≤ k} (1 - beta_u)` with `beta` linearly spaced from
/// `beta_min` to `beta_max` over `t_total` entries.
///
/// The returned schedule uses `t_e` and `t_r` clamped into `[1, t_total]`
/// from the paper defaults; use [`Schedule::with_steps`] or
/// [`Schedule::with_strengths`] to change them.
pub fn make_schedule(t_total: usize, beta_min: f64, beta_max: f64) -> Result<Schedule> {
    if t_total == 0 {
        return Err(Error::contract("t_total must be at least 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::contract(format!(
            "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_total);
    let mut acc = 1.0;
    for k in 0..t_total {
        let beta = if t_total == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * k as f64 / (t_total - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(Schedule {
        alpha_bar,
        t_e: DEFAULT_T_E.clamp(1, t_total),
        t_r: DEFAULT_T_R.clamp(1, t_total),
    })
}

impl Schedule {
    pub fn t_total(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal level at `step`: 1 at step 0, `alpha_bar[step - 1]` after.
    #[inline]
    pub fn signal(&self, step: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.alpha_bar[step - 1]
        }
    }

    pub fn t_e(&self) -> usize {
        self.t_e
    }

    pub fn t_r(&self) -> usize {
        self.t_r
    }

    pub fn with_steps(mut self, t_e: usize, t_r: usize) -> Result<Self> {
        let t = self.t_total();
        for (name, s) in [("t_e", t_e), ("t_r", t_r)] {
            if !(1..=t).contains(&s) {
                return Err(Error::contract(format!("{name} = {s} outside [1, {t}]")));
            }
        }
        self.t_e = t_e;
        self.t_r = t_r;
        Ok(self)
    }

    /// Sets `t_e` and `t_r` from inversion strengths.
    pub fn with_strengths(self, eta_e: f64, eta_r: f64) -> Result<Self> {
        let t = self.t_total();
        self.with_steps(step_for_strength(eta_e, t), step_for_strength(eta_r, t))
    }

    pub(crate) fn check_step(&self, step: usize) -> Result<()> {
        if step > self.t_total() {
            return Err(Error::contract(format!("step {step} beyond t_total {}", self.t_total())));
        }
        Ok(())
    }
}

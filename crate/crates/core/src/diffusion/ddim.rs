use alloc::format;

use super::{Denoiser, Schedule};
use crate::grid::{Grid, LatentGrid};
use crate::math;
use crate::{Error, Result};

const FIXED_POINT_MAX_ITERS: usize = 200;
const FIXED_POINT_TOL: f64 = 1e-14;

/// `(a, b)` such that the deterministic DDIM move from `from` to `to` is
/// `x_to = a · x_from + b · ε`.
pub fn ddim_step_coefficients(sched: &Schedule, from: usize, to: usize) -> (f64, f64) {
    let (ab_from, ab_to) = (sched.signal(from), sched.signal(to));
    let a = math::sqrt(ab_to / ab_from);
    let b = math::sqrt(1.0 - ab_to) - a * math::sqrt(1.0 - ab_from);
    (a, b)
}

fn affine(x: &Grid, a: f64, eps: &Grid, b: f64) -> Grid {
    x.zip_map(eps, |x, e| a * x + b * e)
}

/// Maps a clean latent to step `t_target`.
///
/// Each step solves the implicit DDIM relation exactly: `x_{t+1}` is chosen
/// so that denoising it with `ε(x_{t+1}, t+1)` lands back on `x_t`. The
/// solve is a fixed-point iteration seeded with the explicit update, which
/// makes [`ddim_denoise`] a true inverse of this function.
pub fn ddim_invert<D: Denoiser + ?Sized>(z0: &LatentGrid, den: &D, sched: &Schedule, t_target: usize) -> Result<LatentGrid> {
    if z0.timestep != 0 {
        return Err(Error::contract(format!("inversion expects a clean latent, got step {}", z0.timestep)));
    }
    sched.check_step(t_target)?;
    let mut x = z0.values.clone();
    for t in 0..t_target {
        // denoise t+1 -> t:  x_t = a x_{t+1} + b ε(x_{t+1})
        let (a, b) = ddim_step_coefficients(sched, t + 1, t);
        let eps = den.noise_predict(&x, t + 1);
        let mut next = affine(&x, 1.0 / a, &eps, -b / a);
        for _ in 0..FIXED_POINT_MAX_ITERS {
            let eps = den.noise_predict(&next, t + 1);
            let refined = affine(&x, 1.0 / a, &eps, -b / a);
            let change = refined.max_abs_diff(&next);
            let scale = 1.0 + refined.data().iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
            next = refined;
            if !(change.is_finite()) || change <= FIXED_POINT_TOL * scale {
                break;
            }
        }
        if !next.is_finite() {
            return Err(Error::numerical("ddim_invert", t + 1));
        }
        x = next;
    }
    Ok(LatentGrid::new(x, t_target, z0.latent_stride))
}

/// Deterministic DDIM sampling from `t_from` down to `t_to`.
pub fn ddim_denoise<D: Denoiser + ?Sized>(
    z_t: &LatentGrid,
    den: &D,
    sched: &Schedule,
    t_from: usize,
    t_to: usize,
) -> Result<LatentGrid> {
    if z_t.timestep != t_from {
        return Err(Error::contract(format!(
            "latent is tagged step {} but denoising starts at {t_from}",
            z_t.timestep
        )));
    }
    if t_to > t_from {
        return Err(Error::contract(format!("cannot denoise upwards from {t_from} to {t_to}")));
    }
    sched.check_step(t_from)?;
    let mut x = z_t.values.clone();
    for t in (t_to + 1..=t_from).rev() {
        let (a, b) = ddim_step_coefficients(sched, t, t - 1);
        let eps = den.noise_predict(&x, t);
        x = affine(&x, a, &eps, b);
        if !x.is_finite() {
            return Err(Error::numerical("ddim_denoise", t));
        }
    }
    Ok(LatentGrid::new(x, t_to, z_t.latent_stride))
}

/// Single DDIM update from `z_t.timestep` to one step earlier.
pub fn denoise_one_step<D: Denoiser + ?Sized>(z_t: &LatentGrid, den: &D, sched: &Schedule) -> Result<LatentGrid> {
    if z_t.timestep == 0 {
        return Err(Error::contract("cannot denoise a step-0 latent"));
    }
    ddim_denoise(z_t, den, sched, z_t.timestep, z_t.timestep - 1)
}

/// Vector-Jacobian product of [`denoise_one_step`] at `z_t`.
pub fn denoise_one_step_vjp<D: Denoiser + ?Sized>(z_t: &LatentGrid, den: &D, sched: &Schedule, cotangent: &Grid) -> Result<Grid> {
    let t = z_t.timestep;
    if t == 0 {
        return Err(Error::contract("cannot denoise a step-0 latent"));
    }
    sched.check_step(t)?;
    let (a, b) = ddim_step_coefficients(sched, t, t - 1);
    let back = den.noise_vjp(&z_t.values, t, cotangent);
    Ok(affine(cotangent, a, &back, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ToyDenoiser};

    fn latent() -> LatentGrid {
        let g = Grid::from_fn(6, 5, 3, |v, u, c| math::sin((v * 5 + u) as f64 * 0.7 + c as f64));
        LatentGrid::new(g, 0, 4)
    }

    #[test]
    fn zero_target_is_identity() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = latent();
        let out = ddim_invert(&z, &ToyDenoiser::Linear { a: 0.1 }, &s, 0).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn zero_denoiser_scales_by_signal_ratio() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = latent();
        let out = ddim_invert(&z, &ToyDenoiser::Zero, &s, 20).unwrap();
        let k = math::sqrt(s.signal(20) / s.signal(0));
        for (a, b) in out.values.data().iter().zip(z.values.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }
        assert_eq!(out.timestep, 20);
    }

    #[test]
    fn denoise_from_equal_steps_is_identity() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = latent().with_timestep(7);
        assert_eq!(ddim_denoise(&z, &ToyDenoiser::Smoothing, &s, 7, 7).unwrap(), z);
    }

    #[test]
    fn rejects_wrong_tags() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let z = latent().with_timestep(3);
        assert!(ddim_invert(&z, &ToyDenoiser::Zero, &s, 5).is_err());
        assert!(ddim_denoise(&z, &ToyDenoiser::Zero, &s, 4, 0).is_err());
        assert!(ddim_denoise(&z, &ToyDenoiser::Zero, &s, 3, 5).is_err());
        assert!(ddim_invert(&latent(), &ToyDenoiser::Zero, &s, 11).is_err());
    }

    #[test]
    fn divergent_predictor_reports_step() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let z = LatentGrid::new(Grid::filled(2, 2, 1, 1e300), 0, 1);
        let err = ddim_invert(&z, &ToyDenoiser::Linear { a: 1e10 }, &s, 10).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn one_step_matches_multi_step() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = latent().with_timestep(20);
        let den = ToyDenoiser::Smoothing;
        assert_eq!(denoise_one_step(&z, &den, &s).unwrap(), ddim_denoise(&z, &den, &s, 20, 19).unwrap());
    }
}

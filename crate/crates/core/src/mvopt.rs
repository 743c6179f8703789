//! Per-view latent optimization against the rendered latent map.
//!
//! `L_total = L_rec + λ·L_mask`, minimized by plain subgradient steps of
//! size `σ` on the inverted latent of the view:
//!
//! * `L_rec`: L1 distance of the current latent to the rendered map on
//!   covered pixels inside the rendered mask. The map is a constant.
//! * `L_mask`: L1 distance, weighted by `1 − mask`, between the one-step
//!   denoised current latent and the one-step denoised initial latent. The
//!   latter is computed once and held constant.

use alloc::format;
use alloc::vec::Vec;

use crate::diffusion::{ddim_denoise, ddim_invert, denoise_one_step, denoise_one_step_vjp, Decoder, Denoiser, Schedule};
use crate::grid::{Grid, Image, LatentGrid};
use crate::latent_field::{render_latent_map, AttributedPointCloud, RenderedMaps};
use crate::geometry::CameraView;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MVOptConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub m_iters: usize,
    /// Rendered mask values at or above this count as inside the edit.
    pub mask_threshold: f64,
    /// Measure `L_rec` on the initial latent instead of the iterate. The
    /// term then has no gradient; kept for inspection only.
    pub literal_rec: bool,
}

impl Default for MVOptConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sigma: 0.05,
            m_iters: 60,
            mask_threshold: 0.5,
            literal_rec: false,
        }
    }
}

impl MVOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config(format!("mask threshold must lie in [0, 1], got {}", self.mask_threshold)));
        }
        Ok(())
    }
}

/// Loss values at one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub rec: f64,
    pub mask: f64,
    pub total: f64,
}

fn check_maps(z: &LatentGrid, maps: &RenderedMaps) -> Result<()> {
    let (h, w, _) = z.shape();
    if !z.values.same_shape(&maps.latent_map.values) || maps.mask_map.height() != h || maps.mask_map.width() != w {
        return Err(Error::contract(format!(
            "latent {:?} and rendered map {:?} differ in shape",
            z.shape(),
            maps.latent_map.shape()
        )));
    }
    Ok(())
}

/// Per-pixel weight of the reconstruction term: covered and inside the mask.
pub fn rec_weights(maps: &RenderedMaps, mask_threshold: f64) -> Vec<f64> {
    maps.coverage
        .iter()
        .zip(maps.mask_map.values())
        .map(|(&c, &m)| if c && m >= mask_threshold { 1.0 } else { 0.0 })
        .collect()
}

fn weighted_l1(a: &Grid, b: &Grid, weights: &[f64]) -> f64 {
    let c = a.channels();
    a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(k, (x, y))| weights[k / c] * math::abs(x - y))
        .sum()
}

fn weighted_sign(a: &Grid, b: &Grid, weights: &[f64]) -> Grid {
    let c = a.channels();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(k, (x, y))| weights[k / c] * math::sign(x - y))
        .collect();
    Grid::from_vec(a.height(), a.width(), c, data).expect("same shape")
}

/// `‖(z − map) ⊙ support‖₁` with support = covered ∧ mask ≥ threshold.
pub fn rec_loss(z_cur: &LatentGrid, maps: &RenderedMaps, mask_threshold: f64) -> Result<f64> {
    check_maps(z_cur, maps)?;
    if z_cur.timestep != maps.latent_map.timestep {
        return Err(Error::contract(format!(
            "latent at step {} compared with a map at step {}",
            z_cur.timestep, maps.latent_map.timestep
        )));
    }
    Ok(weighted_l1(&z_cur.values, &maps.latent_map.values, &rec_weights(maps, mask_threshold)))
}

/// `‖(f(z) − f(z_init)) ⊙ (1 − mask)‖₁` with `f` one denoising step.
pub fn mask_loss<D: Denoiser + ?Sized>(
    z_cur: &LatentGrid,
    z_init: &LatentGrid,
    maps: &RenderedMaps,
    den: &D,
    sched: &Schedule,
) -> Result<f64> {
    check_maps(z_cur, maps)?;
    let keep: Vec<f64> = maps.mask_map.values().iter().map(|m| 1.0 - m).collect();
    let cur = denoise_one_step(z_cur, den, sched)?;
    let init = denoise_one_step(z_init, den, sched)?;
    Ok(weighted_l1(&cur.values, &init.values, &keep))
}

/// The per-view objective with its constant parts evaluated once.
pub struct ViewObjective<'a, D: Denoiser + ?Sized> {
    maps: &'a RenderedMaps,
    den: &'a D,
    sched: &'a Schedule,
    cfg: MVOptConfig,
    z_init: LatentGrid,
    cached: LatentGrid,
    rec_w: Vec<f64>,
    keep_w: Vec<f64>,
}

impl<'a, D: Denoiser + ?Sized> ViewObjective<'a, D> {
    pub fn new(z_init: &LatentGrid, maps: &'a RenderedMaps, den: &'a D, sched: &'a Schedule, cfg: &MVOptConfig) -> Result<Self> {
        cfg.validate()?;
        check_maps(z_init, maps)?;
        if z_init.timestep != maps.latent_map.timestep {
            return Err(Error::contract(format!(
                "latent at step {} optimized against a map at step {}",
                z_init.timestep, maps.latent_map.timestep
            )));
        }
        let cached = denoise_one_step(z_init, den, sched)?;
        Ok(Self {
            maps,
            den,
            sched,
            cfg: *cfg,
            z_init: z_init.clone(),
            cached,
            rec_w: rec_weights(maps, cfg.mask_threshold),
            keep_w: maps.mask_map.values().iter().map(|m| 1.0 - m).collect(),
        })
    }

    /// One-step prediction of the initial latent, held constant.
    pub fn cached_prediction(&self) -> &LatentGrid {
        &self.cached
    }

    fn at(&self, z: &Grid) -> LatentGrid {
        LatentGrid::new(z.clone(), self.z_init.timestep, self.z_init.latent_stride)
    }

    pub fn losses(&self, z: &Grid) -> Result<LossRecord> {
        let rec_src = if self.cfg.literal_rec { &self.z_init.values } else { z };
        let rec = weighted_l1(rec_src, &self.maps.latent_map.values, &self.rec_w);
        let pred = denoise_one_step(&self.at(z), self.den, self.sched)?;
        let mask = weighted_l1(&pred.values, &self.cached.values, &self.keep_w);
        Ok(LossRecord {
            rec,
            mask,
            total: rec + self.cfg.lambda * mask,
        })
    }

    /// Subgradient of `L_total` at `z` (`sign(0) = 0`).
    pub fn gradient(&self, z: &Grid) -> Result<Grid> {
        let rec = if self.cfg.literal_rec {
            z.map(|_| 0.0)
        } else {
            weighted_sign(z, &self.maps.latent_map.values, &self.rec_w)
        };
        if self.cfg.lambda == 0.0 {
            return Ok(rec);
        }
        let zl = self.at(z);
        let pred = denoise_one_step(&zl, self.den, self.sched)?;
        let cot = weighted_sign(&pred.values, &self.cached.values, &self.keep_w);
        let back = denoise_one_step_vjp(&zl, self.den, self.sched, &cot)?;
        let lambda = self.cfg.lambda;
        Ok(rec.zip_map(&back, |r, m| r + lambda * m))
    }

    /// `m_iters` steps from the initial latent; the trace holds the losses
    /// at each iterate before its step.
    pub fn run(&self) -> Result<(LatentGrid, Vec<LossRecord>)> {
        let mut z = self.z_init.values.clone();
        let mut trace = Vec::with_capacity(self.cfg.m_iters);
        for k in 0..self.cfg.m_iters {
            let rec = self.losses(&z)?;
            if !rec.total.is_finite() {
                return Err(Error::numerical("optimize_view_latent", k));
            }
            trace.push(rec);
            let g = self.gradient(&z)?;
            let sigma = self.cfg.sigma;
            z = z.zip_map(&g, |x, g| x - sigma * g);
            if !z.is_finite() {
                return Err(Error::numerical("optimize_view_latent", k));
            }
        }
        Ok((self.at(&z), trace))
    }
}

/// Optimizes `z_init` against `maps`; returns the final latent and the trace.
pub fn optimize_view_latent<D: Denoiser + ?Sized>(
    z_init: &LatentGrid,
    maps: &RenderedMaps,
    den: &D,
    sched: &Schedule,
    cfg: &MVOptConfig,
) -> Result<(LatentGrid, Vec<LossRecord>)> {
    ViewObjective::new(z_init, maps, den, sched, cfg)?.run()
}

/// Outcome of propagating the edit into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEditResult {
    pub view_id: usize,
    pub initial_latent: LatentGrid,
    pub optimized_latent: LatentGrid,
    pub edited_image: Image,
    pub loss_trace: Vec<LossRecord>,
    pub maps: RenderedMaps,
    /// Set when no cloud point reached the view; the image is then the
    /// unedited round trip.
    pub uncovered: bool,
}

/// Inverts `image` to `t_r`, optimizes it against the cloud's rendering in
/// `cam`, then denoises and decodes the result.
pub fn edit_view<D: Denoiser + ?Sized, C: Decoder + ?Sized>(
    image: &Image,
    cloud: &AttributedPointCloud,
    cam: &CameraView,
    den: &D,
    sched: &Schedule,
    codec: &C,
    cfg: &MVOptConfig,
) -> Result<ViewEditResult> {
    let t_r = sched.t_r();
    if cloud.timestep != t_r {
        return Err(Error::contract(format!("cloud carries step-{} latents, expected {t_r}", cloud.timestep)));
    }
    if image.width() != cam.width || image.height() != cam.height {
        return Err(Error::contract(format!("image of view {} does not match its camera", cam.view_id)));
    }
    let z0 = codec.encode(image)?;
    let z_init = ddim_invert(&z0, den, sched, t_r)?;
    let maps = render_latent_map(cloud, cam, codec.stride())?;
    let uncovered = maps.coverage_count() == 0;
    let (optimized, trace) = if uncovered {
        (z_init.clone(), Vec::new())
    } else {
        optimize_view_latent(&z_init, &maps, den, sched, cfg)?
    };
    let clean = ddim_denoise(&optimized, den, sched, t_r, 0)?;
    Ok(ViewEditResult {
        view_id: cam.view_id,
        initial_latent: z_init,
        edited_image: codec.decode(&clean),
        optimized_latent: optimized,
        loss_trace: trace,
        maps,
        uncovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, LatentCodec, ToyDenoiser};
    use crate::grid::MaskGrid;
    use crate::rng::SeededRng;
    use alloc::vec;

    fn maps_from(latent: Grid, mask: Vec<f64>, coverage: Vec<bool>, t: usize) -> RenderedMaps {
        let (h, w) = (latent.height(), latent.width());
        RenderedMaps {
            latent_map: LatentGrid::new(latent, t, 1),
            mask_map: MaskGrid::from_vec(h, w, mask).unwrap(),
            source: vec![None; h * w],
            coverage,
        }
    }

    fn sched() -> Schedule {
        make_schedule(50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn rec_loss_by_hand() {
        let map = Grid::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let maps = maps_from(map.clone(), vec![1.0, 1.0, 0.0, 1.0], vec![true, true, true, false], 20);
        let z = LatentGrid::new(Grid::from_vec(2, 2, 1, vec![1.5, 0.0, 10.0, 10.0]).unwrap(), 20, 1);
        // only pixels 0 and 1 count: |1.5-1| + |0-2|
        assert_eq!(rec_loss(&z, &maps, 0.5).unwrap(), 2.5);
        assert_eq!(rec_loss(&LatentGrid::new(map.clone(), 20, 1), &maps, 0.5).unwrap(), 0.0);
        let empty = maps_from(map, vec![0.0; 4], vec![true; 4], 20);
        assert_eq!(rec_loss(&z, &empty, 0.5).unwrap(), 0.0);
        let wrong = LatentGrid::new(Grid::zeros(1, 2, 1), 20, 1);
        assert!(rec_loss(&wrong, &maps, 0.5).is_err());
    }

    #[test]
    fn mask_loss_zero_denoiser_by_hand() {
        let s = sched();
        let maps = maps_from(Grid::zeros(1, 2, 1), vec![0.0, 0.25], vec![true; 2], 20);
        let z_init = LatentGrid::new(Grid::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap(), 20, 1);
        let z = LatentGrid::new(Grid::from_vec(1, 2, 1, vec![3.0, 1.0]).unwrap(), 20, 1);
        // zero denoiser: one step scales by a = sqrt(ᾱ19 / ᾱ20)
        let a = math::sqrt(s.signal(19) / s.signal(20));
        let hand = a * (3.0f64 - 1.0).abs() * 1.0 + a * (1.0f64 - 2.0).abs() * 0.75;
        let got = mask_loss(&z, &z_init, &maps, &ToyDenoiser::Zero, &s).unwrap();
        assert!((got - hand).abs() < 1e-12);
        assert_eq!(mask_loss(&z_init, &z_init, &maps, &ToyDenoiser::Zero, &s).unwrap(), 0.0);
        let full = maps_from(Grid::zeros(1, 2, 1), vec![1.0, 1.0], vec![true; 2], 20);
        assert_eq!(mask_loss(&z, &z_init, &full, &ToyDenoiser::Zero, &s).unwrap(), 0.0);
    }

    #[test]
    fn zero_iterations_return_input() {
        let s = sched();
        let z = LatentGrid::new(Grid::filled(2, 2, 2, 0.3), 20, 1);
        let maps = maps_from(Grid::zeros(2, 2, 2), vec![1.0; 4], vec![true; 4], 20);
        let cfg = MVOptConfig { m_iters: 0, ..Default::default() };
        let (out, trace) = optimize_view_latent(&z, &maps, &ToyDenoiser::Linear { a: 0.1 }, &s, &cfg).unwrap();
        assert_eq!(out, z);
        assert!(trace.is_empty());
    }

    #[test]
    fn l1_descent_matches_scalar_oracle() {
        let s = sched();
        let init = Grid::from_vec(1, 3, 1, vec![0.3, -0.2071, 0.05]).unwrap();
        let target = Grid::from_vec(1, 3, 1, vec![0.0, 0.1, 0.05]).unwrap();
        let maps = maps_from(target.clone(), vec![1.0; 3], vec![true; 3], 20);
        let cfg = MVOptConfig {
            lambda: 0.0,
            sigma: 1e-4,
            m_iters: 4000,
            ..Default::default()
        };
        let (out, trace) = optimize_view_latent(&LatentGrid::new(init.clone(), 20, 1), &maps, &ToyDenoiser::Linear { a: 0.1 }, &s, &cfg).unwrap();
        assert_eq!(trace.len(), 4000);
        let mut expected = 0.0;
        for k in 0..3 {
            let (mut x, t) = (init.data()[k], target.data()[k]);
            for _ in 0..4000 {
                x -= 1e-4 * math::sign(x - t);
            }
            assert!((out.values.data()[k] - x).abs() < 1e-9);
            expected += (x - t).abs();
        }
        let final_rec = rec_loss(&out, &maps, 0.5).unwrap();
        assert!((final_rec - expected).abs() < 1e-9);
        assert!(final_rec < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = sched();
        let den = ToyDenoiser::Linear { a: 0.1 };
        let mut rng = SeededRng::new(11);
        let mut rand_grid = |h, w, c| Grid::from_fn(h, w, c, |_, _, _| rng.normal());
        let map = rand_grid(3, 3, 2);
        let z_init = LatentGrid::new(rand_grid(3, 3, 2), 20, 1);
        let z = rand_grid(3, 3, 2);
        let maps = maps_from(map, vec![1.0, 0.0, 0.3, 1.0, 0.6, 0.0, 1.0, 1.0, 0.2], vec![true; 9], 20);
        let obj = ViewObjective::new(&z_init, &maps, &den, &s, &MVOptConfig::default()).unwrap();
        let g = obj.gradient(&z).unwrap();
        let h = 1e-6;
        for k in 0..z.data().len() {
            let (mut a, mut b) = (z.clone(), z.clone());
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (obj.losses(&a).unwrap().total - obj.losses(&b).unwrap().total) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() <= 1e-4 * g.data()[k].abs().max(1e-2), "{k}: {fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn consistent_view_is_round_trip() {
        let s = sched();
        let den = ToyDenoiser::Linear { a: 0.1 };
        let codec = LatentCodec::identity();
        let img = Grid::from_fn(6, 6, 3, |v, u, c| ((v * 5 + u * 3 + c) % 7) as f64 / 7.0);
        let z_init = ddim_invert(&codec.encode(&img).unwrap(), &den, &s, 20).unwrap();
        let round = codec.decode(&ddim_denoise(&z_init, &den, &s, 20, 0).unwrap());
        let same = maps_from(z_init.values.clone(), vec![1.0; 36], vec![true; 36], 20);
        let (out, _) = optimize_view_latent(&z_init, &same, &den, &s, &MVOptConfig::default()).unwrap();
        let img_out = codec.decode(&ddim_denoise(&out, &den, &s, 20, 0).unwrap());
        assert!(img_out.max_abs_diff(&round) < 1e-4);
        let nothing = maps_from(Grid::zeros(6, 6, 3), vec![0.0; 36], vec![false; 36], 20);
        let (out, _) = optimize_view_latent(&z_init, &nothing, &den, &s, &MVOptConfig::default()).unwrap();
        assert_eq!(out, z_init);
    }

    #[test]
    fn cached_prediction_and_map_untouched() {
        let s = sched();
        let den = ToyDenoiser::Smoothing;
        let maps = maps_from(Grid::filled(4, 4, 2, 0.5), vec![0.5; 16], vec![true; 16], 20);
        let snapshot = maps.clone();
        let z = LatentGrid::new(Grid::from_fn(4, 4, 2, |v, u, c| (v + 2 * u + c) as f64 * 0.1), 20, 1);
        let obj = ViewObjective::new(&z, &maps, &den, &s, &MVOptConfig::default()).unwrap();
        let before = obj.cached_prediction().clone();
        let (_, trace) = obj.run().unwrap();
        assert_eq!(obj.cached_prediction(), &before);
        assert_eq!(maps, snapshot);
        assert_eq!(trace.len(), 60);
    }

    #[test]
    fn literal_rec_has_no_gradient() {
        let s = sched();
        let maps = maps_from(Grid::filled(2, 2, 1, 1.0), vec![1.0; 4], vec![true; 4], 20);
        let z = LatentGrid::new(Grid::zeros(2, 2, 1), 20, 1);
        let cfg = MVOptConfig { literal_rec: true, ..Default::default() };
        let (out, trace) = optimize_view_latent(&z, &maps, &ToyDenoiser::Zero, &s, &cfg).unwrap();
        assert_eq!(out, z);
        assert!(trace.iter().all(|r| r.rec == 4.0));
    }

    #[test]
    fn step_mismatch_is_rejected() {
        let s = sched();
        let maps = maps_from(Grid::zeros(2, 2, 1), vec![1.0; 4], vec![true; 4], 19);
        let z = LatentGrid::new(Grid::zeros(2, 2, 1), 20, 1);
        assert!(optimize_view_latent(&z, &maps, &ToyDenoiser::Zero, &s, &MVOptConfig::default()).is_err());
    }
}

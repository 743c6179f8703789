//! Reference-view drag editing in latent space.
//!
//! The latent at step `t_e` is optimized by motion supervision on the
//! denoiser's feature map, with point tracking relocating the handles after
//! every step. The edited latent is then denoised, decoded, and re-inverted
//! to `t_r` so later stages start from a clean inversion of the edited image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{ddim_denoise, ddim_invert, Decoder, Denoiser, Schedule};
use crate::grid::{Grid, Image, LatentGrid, MaskGrid};
use crate::math;
use crate::{Error, Result};

/// User drag instruction on the reference view. Points are `(u, v)` image
/// pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub ref_view: usize,
    pub mask: MaskGrid,
    pub handles: Vec<(f64, f64)>,
    pub targets: Vec<(f64, f64)>,
}

impl EditSpec {
    pub fn new(ref_view: usize, mask: MaskGrid, handles: Vec<(f64, f64)>, targets: Vec<(f64, f64)>) -> Result<Self> {
        let spec = Self {
            ref_view,
            mask,
            handles,
            targets,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.handles.is_empty() || self.handles.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "need equally many handles and targets (>= 1), got {} and {}",
                self.handles.len(),
                self.targets.len()
            )));
        }
        let (w, h) = (self.mask.width() as f64, self.mask.height() as f64);
        for &(u, v) in self.handles.iter().chain(&self.targets) {
            if !(u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
                return Err(Error::invalid(format!("drag point ({u}, {v}) outside the {w}x{h} image")));
            }
        }
        if self.mask.is_empty() {
            return Err(Error::invalid("edit mask is empty"));
        }
        Ok(())
    }

    /// True when every handle already sits on its target.
    pub fn is_noop(&self) -> bool {
        self.handles == self.targets
    }
}

/// Drag optimization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragConfig {
    /// Optimization steps `m`.
    pub m: usize,
    pub lr: f64,
    /// Weight of the L1 term keeping the unmasked latent unchanged.
    pub beta: f64,
    /// Half-width of the point-tracking search window, latent pixels.
    pub r_track: usize,
    /// Half-width of the motion-supervision patch around each handle.
    pub r_patch: usize,
}

impl Default for DragConfig {
    fn default() -> Self {
        Self {
            m: 40,
            lr: 0.01,
            beta: 0.1,
            r_track: 3,
            r_patch: 1,
        }
    }
}

/// Output of [`drag_edit`].
#[derive(Debug, Clone, PartialEq)]
pub struct DragResult {
    /// Inverted latent before optimization, step `t_e`.
    pub initial_latent_te: LatentGrid,
    /// Optimized latent, step `t_e`.
    pub edited_latent_te: LatentGrid,
    pub edited_image: Image,
    /// Re-inversion of `edited_image`, step `t_r`.
    pub reference_latent_tr: LatentGrid,
    /// Final handle positions, image pixels.
    pub tracked_handles: Vec<(f64, f64)>,
    /// Indices of handles that had to be clamped back into the image.
    pub clamped_handles: Vec<usize>,
    /// Optimization steps actually taken.
    pub iterations: usize,
    /// Motion-supervision loss before each step.
    pub motion_loss_trace: Vec<f64>,
}

impl DragResult {
    /// True when the optimization changed the latent.
    pub fn changed(&self) -> bool {
        self.edited_latent_te != self.initial_latent_te
    }
}

/// One frozen motion-supervision term: the feature read at `pos` is pulled
/// towards `target`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MotionTerm {
    pub pos: (f64, f64),
    pub target: Vec<f64>,
}

/// Builds the terms for the current handles: for every patch offset `q`
/// around `h_j`, `F(h_j + q + d_j)` is pulled towards `stopgrad(F(h_j + q))`
/// with `d_j` the unit step towards the target. Handles within one pixel of
/// their target contribute nothing.
pub(crate) fn motion_terms(features: &Grid, handles: &[(f64, f64)], targets: &[(f64, f64)], r_patch: usize) -> Vec<MotionTerm> {
    let r = r_patch as i64;
    let mut terms = Vec::new();
    let mut buf = vec![0.0; features.channels()];
    for (&(hx, hy), &(tx, ty)) in handles.iter().zip(targets) {
        let (dx, dy) = (tx - hx, ty - hy);
        let dist = math::sqrt(dx * dx + dy * dy);
        if dist <= 1.0 {
            continue;
        }
        let (dx, dy) = (dx / dist, dy / dist);
        for qy in -r..=r {
            for qx in -r..=r {
                let (px, py) = (hx + qx as f64, hy + qy as f64);
                features.sample_bilinear(px, py, &mut buf);
                terms.push(MotionTerm {
                    pos: (px + dx, py + dy),
                    target: buf.clone(),
                });
            }
        }
    }
    terms
}

/// L1 motion loss of frozen `terms` and its gradient with respect to the
/// feature map.
pub(crate) fn motion_loss_and_grad(features: &Grid, terms: &[MotionTerm]) -> (f64, Grid) {
    let mut grad = Grid::zeros(features.height(), features.width(), features.channels());
    let mut buf = vec![0.0; features.channels()];
    let mut sign = vec![0.0; features.channels()];
    let mut loss = 0.0;
    for term in terms {
        features.sample_bilinear(term.pos.0, term.pos.1, &mut buf);
        for ((s, cur), tgt) in sign.iter_mut().zip(&buf).zip(&term.target) {
            loss += math::abs(cur - tgt);
            *s = math::sign(cur - tgt);
        }
        grad.scatter_bilinear(term.pos.0, term.pos.1, &sign);
    }
    (loss, grad)
}

/// Motion-supervision loss of `features` for handles at `handles` moving
/// towards `targets` (latent-pixel coordinates).
pub fn motion_supervision_loss(features: &Grid, handles: &[(f64, f64)], targets: &[(f64, f64)], r_patch: usize) -> f64 {
    let terms = motion_terms(features, handles, targets, r_patch);
    motion_loss_and_grad(features, &terms).0
}

fn feature_distance(features: &Grid, pos: (f64, f64), reference: &[f64], buf: &mut [f64]) -> f64 {
    features.sample_bilinear(pos.0, pos.1, buf);
    buf.iter().zip(reference).map(|(a, b)| math::abs(a - b)).sum()
}

/// Moves `handle` to the position in its `(2r+1)²` integer-offset window
/// whose feature is L1-closest to `reference`. Ties keep the first window
/// entry in row-major order. Returns the new position and whether it had to
/// be clamped into the grid.
pub fn track_point(features: &Grid, handle: (f64, f64), reference: &[f64], r_track: usize) -> ((f64, f64), bool) {
    let r = r_track as i64;
    let (max_x, max_y) = ((features.width() - 1) as f64, (features.height() - 1) as f64);
    let mut buf = vec![0.0; features.channels()];
    let mut best = (f64::INFINITY, handle, false);
    for dy in -r..=r {
        for dx in -r..=r {
            let raw = (handle.0 + dx as f64, handle.1 + dy as f64);
            let pos = (raw.0.clamp(0.0, max_x), raw.1.clamp(0.0, max_y));
            let d = feature_distance(features, pos, reference, &mut buf);
            if d < best.0 {
                best = (d, pos, pos != raw);
            }
        }
    }
    (best.1, best.2)
}

/// Drag-edits `image` as described by `spec`.
pub fn drag_edit<D: Denoiser + ?Sized, C: Decoder + ?Sized>(
    image: &Image,
    spec: &EditSpec,
    den: &D,
    sched: &Schedule,
    codec: &C,
    cfg: &DragConfig,
) -> Result<DragResult> {
    spec.validate()?;
    if spec.mask.width() != image.width() || spec.mask.height() != image.height() {
        return Err(Error::contract("edit mask resolution does not match the image"));
    }
    let stride = codec.stride();
    let s = stride as f64;
    let t_e = sched.t_e();
    let z0 = codec.encode(image)?;
    let initial = ddim_invert(&z0, den, sched, t_e)?;
    let keep = spec.mask.downsample_mean(stride)?;

    let mut handles: Vec<(f64, f64)> = spec.handles.iter().map(|&(u, v)| (u / s, v / s)).collect();
    let targets: Vec<(f64, f64)> = spec.targets.iter().map(|&(u, v)| (u / s, v / s)).collect();
    let f_init = den.feature_map(&initial.values, t_e);
    let references: Vec<Vec<f64>> = handles
        .iter()
        .map(|&(x, y)| {
            let mut buf = vec![0.0; f_init.channels()];
            f_init.sample_bilinear(x, y, &mut buf);
            buf
        })
        .collect();

    let mut z = initial.values.clone();
    let mut clamped = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for k in 0..cfg.m {
        let arrived = handles.iter().zip(&targets).all(|(h, t)| {
            let (dx, dy) = (t.0 - h.0, t.1 - h.1);
            dx * dx + dy * dy <= 1.0
        });
        if arrived {
            break;
        }
        let features = den.feature_map(&z, t_e);
        let terms = motion_terms(&features, &handles, &targets, cfg.r_patch);
        let (motion, grad_f) = motion_loss_and_grad(&features, &terms);
        let mut grad = den.feature_vjp(&z, t_e, &grad_f);
        let mut preserve = 0.0;
        let c = z.channels();
        for (idx, (g, (cur, init))) in grad
            .data_mut()
            .iter_mut()
            .zip(z.data().iter().zip(initial.values.data()))
            .enumerate()
        {
            let w = 1.0 - keep.values()[idx / c];
            preserve += w * math::abs(cur - init);
            *g += cfg.beta * w * math::sign(cur - init);
        }
        let total = motion + cfg.beta * preserve;
        if !total.is_finite() || !grad.is_finite() {
            return Err(Error::numerical("drag_edit", k));
        }
        trace.push(motion);
        for (zv, g) in z.data_mut().iter_mut().zip(grad.data()) {
            *zv -= cfg.lr * g;
        }
        if !z.is_finite() {
            return Err(Error::numerical("drag_edit", k));
        }
        let features = den.feature_map(&z, t_e);
        for (j, h) in handles.iter_mut().enumerate() {
            let (pos, was_clamped) = track_point(&features, *h, &references[j], cfg.r_track);
            if was_clamped && !clamped.contains(&j) {
                clamped.push(j);
            }
            *h = pos;
        }
        iterations = k + 1;
    }

    let edited = LatentGrid::new(z, t_e, stride);
    let clean = ddim_denoise(&edited, den, sched, t_e, 0)?;
    let edited_image = codec.decode(&clean);
    if !edited_image.is_finite() {
        return Err(Error::numerical("drag_edit decode", iterations));
    }
    let reference_latent_tr = reinvert_edited(&edited_image, den, sched, codec)?;
    Ok(DragResult {
        initial_latent_te: initial,
        edited_latent_te: edited,
        edited_image,
        reference_latent_tr,
        tracked_handles: handles.iter().map(|&(x, y)| (x * s, y * s)).collect(),
        clamped_handles: clamped,
        iterations,
        motion_loss_trace: trace,
    })
}

/// Encodes the edited image and inverts it to `t_r`.
pub fn reinvert_edited<D: Denoiser + ?Sized, C: Decoder + ?Sized>(
    edited_image: &Image,
    den: &D,
    sched: &Schedule,
    codec: &C,
) -> Result<LatentGrid> {
    let z0 = codec.encode(edited_image)?;
    ddim_invert(&z0, den, sched, sched.t_r())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, LatentCodec, ToyDenoiser};

    fn blob(cx: f64, cy: f64) -> Image {
        Grid::from_fn(16, 16, 3, |v, u, _| {
            let d2 = (u as f64 - cx).powi(2) + (v as f64 - cy).powi(2);
            (-d2 / (2.0 * 1.5 * 1.5)).exp()
        })
    }

    fn blob_spec(target: (f64, f64)) -> EditSpec {
        let mask = MaskGrid::from_fn(16, 16, |v, u| if (2..=13).contains(&u) && (4..=12).contains(&v) { 1.0 } else { 0.0 });
        EditSpec::new(0, mask, vec![(5.0, 8.0)], vec![target]).unwrap()
    }

    fn round_trip(img: &Image, den: &ToyDenoiser, sched: &Schedule, codec: &LatentCodec) -> Image {
        let z = ddim_invert(&codec.encode(img).unwrap(), den, sched, sched.t_e()).unwrap();
        codec.decode(&ddim_denoise(&z, den, sched, sched.t_e(), 0).unwrap())
    }

    #[test]
    fn spec_validation() {
        let m = MaskGrid::ones(8, 8);
        assert!(EditSpec::new(0, m.clone(), vec![], vec![]).is_err());
        assert!(EditSpec::new(0, m.clone(), vec![(1.0, 1.0)], vec![]).is_err());
        assert!(EditSpec::new(0, m.clone(), vec![(8.0, 1.0)], vec![(1.0, 1.0)]).is_err());
        assert!(EditSpec::new(0, MaskGrid::zeros(8, 8), vec![(1.0, 1.0)], vec![(2.0, 1.0)]).is_err());
        assert!(EditSpec::new(0, m, vec![(7.0, 0.0)], vec![(0.0, 7.0)]).is_ok());
    }

    #[test]
    fn noop_drag_is_round_trip() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let den = ToyDenoiser::Smoothing;
        let codec = LatentCodec::identity();
        let img = blob(5.0, 8.0);
        let spec = blob_spec((5.0, 8.0));
        let z = ddim_invert(&codec.encode(&img).unwrap(), &den, &sched, sched.t_e()).unwrap();
        let f = den.feature_map(&z.values, sched.t_e());
        assert_eq!(motion_supervision_loss(&f, &spec.handles, &spec.targets, 1), 0.0);
        let r = drag_edit(&img, &spec, &den, &sched, &codec, &DragConfig::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(!r.changed());
        assert!(r.edited_image.max_abs_diff(&round_trip(&img, &den, &sched, &codec)) < 1e-5);
        assert_eq!(r.reference_latent_tr.timestep, sched.t_r());
    }

    #[test]
    fn zero_steps_is_round_trip() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let den = ToyDenoiser::Linear { a: 0.1 };
        let codec = LatentCodec::seeded_linear(4, 2, 5).unwrap();
        let img = blob(5.0, 8.0);
        let cfg = DragConfig { m: 0, ..Default::default() };
        let r = drag_edit(&img, &blob_spec((9.0, 8.0)), &den, &sched, &codec, &cfg).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.edited_image.max_abs_diff(&round_trip(&img, &den, &sched, &codec)) < 1e-5);
    }

    #[test]
    fn blob_handle_reaches_target() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let den = ToyDenoiser::Smoothing;
        let codec = LatentCodec::identity();
        let img = blob(5.0, 8.0);
        let target = (9.0, 8.0);
        let cfg = DragConfig { m: 40, lr: 0.1, ..Default::default() };
        let r = drag_edit(&img, &blob_spec(target), &den, &sched, &codec, &cfg).unwrap();
        let (hx, hy) = r.tracked_handles[0];
        assert!(((hx - target.0).powi(2) + (hy - target.1).powi(2)).sqrt() <= 1.0, "{:?}", r.tracked_handles);

        // brute force: the best feature match to the original handle feature
        // over the whole grid sits within one pixel of the target as well
        let f0 = den.feature_map(&r.initial_latent_te.values, sched.t_e());
        let f = den.feature_map(&r.edited_latent_te.values, sched.t_e());
        let reference = f0.pixel(8, 5).to_vec();
        let mut best = (f64::INFINITY, 0, 0);
        for v in 0..16 {
            for u in 0..16 {
                let d: f64 = f.pixel(v, u).iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum();
                if d < best.0 {
                    best = (d, u, v);
                }
            }
        }
        let (bu, bv) = (best.1 as f64, best.2 as f64);
        assert!(((bu - target.0).powi(2) + (bv - target.1).powi(2)).sqrt() <= 1.0, "argmin at ({bu}, {bv})");
        assert_eq!((hx, hy), (bu, bv));
    }

    #[test]
    fn motion_loss_non_increasing_for_small_step() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let den = ToyDenoiser::Smoothing;
        let codec = LatentCodec::identity();
        let z = ddim_invert(&codec.encode(&blob(5.0, 8.0)).unwrap(), &den, &sched, sched.t_e()).unwrap();
        let handles = [(5.0, 8.0)];
        let targets = [(9.0, 8.0)];
        let mut zc = z.values.clone();
        for _ in 0..10 {
            let f = den.feature_map(&zc, 35);
            let terms = motion_terms(&f, &handles, &targets, 1);
            let (before, grad_f) = motion_loss_and_grad(&f, &terms);
            let grad = den.feature_vjp(&zc, 35, &grad_f);
            let next = zc.zip_map(&grad, |a, g| a - 1e-3 * g);
            let (after, _) = motion_loss_and_grad(&den.feature_map(&next, 35), &terms);
            assert!(after <= before + 1e-12, "{after} > {before}");
            zc = next;
        }
    }

    #[test]
    fn tracking_stays_in_window_and_reports_clamping() {
        let f = Grid::from_fn(10, 10, 2, |v, u, c| ((v * 13 + u * 7 + c * 3) % 17) as f64);
        for (h, r) in [((4.0, 4.0), 2), ((0.5, 9.0), 3), ((7.25, 2.0), 1)] {
            for target in [[0.0, 0.0], [16.0, 16.0], [5.0, 9.0]] {
                let (p, _) = track_point(&f, h, &target, r);
                assert!((p.0 - h.0).abs() <= r as f64 && (p.1 - h.1).abs() <= r as f64);
            }
        }
        // best match lies left of the border: the handle is clamped there
        let ramp = Grid::from_fn(6, 6, 1, |v, u, _| u as f64 + 10.0 * (v as f64 - 3.0).abs());
        let (p, clamped) = track_point(&ramp, (1.0, 3.0), &[-2.0], 3);
        assert_eq!(p, (0.0, 3.0));
        assert!(clamped);
    }

    #[test]
    fn reinversion_contracts() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let codec = LatentCodec::identity();
        let den = ToyDenoiser::Linear { a: 0.1 };
        let z = LatentGrid::new(Grid::from_fn(8, 8, 3, |v, u, c| ((v + u + c) % 4) as f64 * 0.25), 0, 1);
        let at_tr = ddim_invert(&z, &den, &sched, sched.t_r()).unwrap();
        let img = codec.decode(&ddim_denoise(&at_tr, &den, &sched, sched.t_r(), 0).unwrap());
        let again = reinvert_edited(&img, &den, &sched, &codec).unwrap();
        assert_eq!(again.timestep, sched.t_r());
        assert!(again.values.max_abs_diff(&at_tr.values) < 1e-5);

        let zero = reinvert_edited(&Grid::zeros(8, 8, 3), &ToyDenoiser::Zero, &sched, &codec).unwrap();
        assert!(zero.values.data().iter().all(|&x| x == 0.0));
    }
}

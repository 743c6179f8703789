//! Masked global alignment of pairwise pointmaps.
//!
//! The world frame is the reference camera frame. Every aligned view `m`
//! owns a fused world-frame pointmap `X^m`; every view `n` owns a pose and a
//! scale `σ_n` applied to predictions expressed in its frame, so a pair
//! prediction `q` (a pixel of `m` seen in frame `n`) lands in the world at
//! `R_nᵀ(σ_n q − t_n)`. The reference pose and scale are pinned, which fixes
//! the gauge.
//!
//! Per pixel `i` of view `m` with mask value `M`, the loss is
//!
//! ```text
//!   Σ_n C·(1−M)/(s+1)·ρ(X^m_i − X̄^{n,m}_i)  +  C·M·ρ(X^m_i − X̄^{0,m}_i)
//! ```
//!
//! with `ρ(r) = sqrt(|r|² + ε²) − ε` and `C` the prediction confidence.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::geometry::{warp_mask, CameraView, Pointmap, Pose};
use crate::grid::MaskGrid;
use crate::math;
use crate::rng::{derive_seed, SeededRng};
use crate::scene::SceneGeometry;
use crate::{Error, Result};

/// Smoothing of the residual norm near zero.
pub const CHARBONNIER_EPS: f64 = 1e-8;

type Block = SMatrix<f64, 3, 7>;

#[inline]
fn rho(r2: f64) -> f64 {
    math::sqrt(r2 + CHARBONNIER_EPS * CHARBONNIER_EPS) - CHARBONNIER_EPS
}

#[inline]
fn rho_scale(r2: f64) -> f64 {
    1.0 / math::sqrt(r2 + CHARBONNIER_EPS * CHARBONNIER_EPS)
}

/// Pixels of `src_view` predicted in the camera frame of `tgt_view`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwisePrediction {
    pub src_view: usize,
    pub tgt_view: usize,
    pub pointmap: Pointmap,
    pub confidence: Vec<f64>,
}

impl PairwisePrediction {
    pub fn new(src_view: usize, tgt_view: usize, pointmap: Pointmap, confidence: Vec<f64>) -> Result<Self> {
        if pointmap.frame != tgt_view {
            return Err(Error::contract(format!(
                "prediction ({src_view}, {tgt_view}) must be expressed in frame {tgt_view}, got {}",
                pointmap.frame
            )));
        }
        if confidence.len() != pointmap.points.len() {
            return Err(Error::contract("confidence and pointmap sizes differ"));
        }
        if confidence.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("confidence must be finite and non-negative"));
        }
        Ok(Self {
            src_view,
            tgt_view,
            pointmap,
            confidence,
        })
    }

    /// Unit confidence on valid pixels.
    pub fn with_unit_confidence(src_view: usize, tgt_view: usize, pointmap: Pointmap) -> Result<Self> {
        let confidence = pointmap.valid.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
        Self::new(src_view, tgt_view, pointmap, confidence)
    }
}

/// Anything that turns an ordered view pair into a pointmap prediction.
pub trait PointmapProvider {
    fn predict(&self, src_view: usize, tgt_view: usize) -> Result<PairwisePrediction>;
}

impl<P: PointmapProvider + ?Sized> PointmapProvider for &P {
    fn predict(&self, src_view: usize, tgt_view: usize) -> Result<PairwisePrediction> {
        (**self).predict(src_view, tgt_view)
    }
}

/// Ground-truth provider for synthetic scenes with optional Gaussian noise.
///
/// Pairs touching the edited reference view see the edited geometry inside
/// the edit region of the source view: the user mask on the reference view
/// and its warp into the other views.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    views: Vec<CameraView>,
    original: SceneGeometry,
    edit: Option<ProviderEdit>,
    noise_sigma: f64,
    seed: u64,
}

#[derive(Debug, Clone)]
struct ProviderEdit {
    ref_view: usize,
    geometry: SceneGeometry,
    mask: MaskGrid,
}

impl SyntheticProvider {
    pub fn new(views: Vec<CameraView>, geometry: SceneGeometry, noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self {
            views,
            original: geometry,
            edit: None,
            noise_sigma,
            seed,
        })
    }

    /// Shows `edited` instead of the original geometry inside the edit region.
    pub fn with_edit(mut self, ref_view: usize, edited: SceneGeometry, mask: MaskGrid) -> Result<Self> {
        let cam = self.camera(ref_view)?;
        if mask.width() != cam.width || mask.height() != cam.height {
            return Err(Error::contract("edit mask resolution does not match the reference view"));
        }
        self.edit = Some(ProviderEdit {
            ref_view,
            geometry: edited,
            mask,
        });
        Ok(self)
    }

    fn camera(&self, id: usize) -> Result<&CameraView> {
        self.views
            .iter()
            .find(|c| c.view_id == id)
            .ok_or_else(|| Error::contract(format!("unknown view id {id}")))
    }

    /// Source pixels of `src` under `geometry`, expressed in `tgt`'s frame.
    fn exact_points(geometry: &SceneGeometry, src: &CameraView, tgt: &CameraView) -> Pointmap {
        let mut out = Pointmap::invalid(tgt.view_id, src.width, src.height);
        for v in 0..src.height {
            for u in 0..src.width {
                let (o, d) = SceneGeometry::pixel_ray(src, u, v);
                if let Some(hit) = geometry.intersect(&o, &d) {
                    let i = out.index(v, u);
                    out.points[i] = if src.view_id == tgt.view_id {
                        src.intrinsics.ray(u as f64, v as f64) * hit.t
                    } else {
                        tgt.pose.transform_point(&hit.point)
                    };
                    out.valid[i] = true;
                }
            }
        }
        out
    }

    fn edit_region(&self, edit: &ProviderEdit, src: &CameraView) -> Result<MaskGrid> {
        if src.view_id == edit.ref_view {
            return Ok(edit.mask.clone());
        }
        let reference = self.camera(edit.ref_view)?;
        let ref_in_src = Self::exact_points(&edit.geometry, reference, src);
        warp_mask(&edit.mask, &ref_in_src, src, src)
    }
}

impl PointmapProvider for SyntheticProvider {
    fn predict(&self, src_view: usize, tgt_view: usize) -> Result<PairwisePrediction> {
        let src = self.camera(src_view)?;
        let tgt = self.camera(tgt_view)?;
        let mut pm = Self::exact_points(&self.original, src, tgt);
        if let Some(edit) = self.edit.as_ref().filter(|e| e.ref_view == src_view || e.ref_view == tgt_view) {
            let region = self.edit_region(edit, src)?;
            let edited = Self::exact_points(&edit.geometry, src, tgt);
            for (i, &m) in region.values().iter().enumerate() {
                if m >= 0.5 {
                    pm.points[i] = edited.points[i];
                    pm.valid[i] = edited.valid[i];
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = SeededRng::new(derive_seed(derive_seed(self.seed, src_view as u64), tgt_view as u64));
            for (p, &ok) in pm.points.iter_mut().zip(&pm.valid) {
                if ok {
                    for k in 0..3 {
                        p[k] += self.noise_sigma * rng.normal();
                    }
                }
            }
        }
        PairwisePrediction::with_unit_confidence(src_view, tgt_view, pm)
    }
}

/// Predictions for the ordered pairs of a list of views, indexed by local
/// position in that list.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    view_ids: Vec<usize>,
    preds: Vec<Option<PairwisePrediction>>,
}

impl PredictionSet {
    /// Files each prediction under its pair; predictions of foreign views
    /// are rejected.
    pub fn from_predictions(view_ids: Vec<usize>, preds: Vec<PairwisePrediction>) -> Result<Self> {
        let k = view_ids.len();
        let mut slots = vec![None; k * k];
        let local = |id: usize| {
            view_ids
                .iter()
                .position(|&v| v == id)
                .ok_or_else(|| Error::contract(format!("prediction names unknown view {id}")))
        };
        for p in preds {
            let (s, t) = (local(p.src_view)?, local(p.tgt_view)?);
            slots[t * k + s] = Some(p);
        }
        Ok(Self { view_ids, preds: slots })
    }

    /// Queries `provider` for every ordered pair, self pairs included.
    pub fn collect<P: PointmapProvider + ?Sized>(view_ids: &[usize], provider: &P) -> Result<Self> {
        let mut preds = Vec::with_capacity(view_ids.len() * view_ids.len());
        for &t in view_ids {
            for &s in view_ids {
                preds.push(provider.predict(s, t)?);
            }
        }
        Self::from_predictions(view_ids.to_vec(), preds)
    }

    pub fn view_ids(&self) -> &[usize] {
        &self.view_ids
    }

    pub fn len(&self) -> usize {
        self.view_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_ids.is_empty()
    }

    /// Pixels of local view `src` in the frame of local view `tgt`.
    pub fn get(&self, src: usize, tgt: usize) -> Result<&PairwisePrediction> {
        let k = self.len();
        if src >= k || tgt >= k {
            return Err(Error::contract(format!("pair ({src}, {tgt}) outside {k} views")));
        }
        self.preds[tgt * k + src]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("missing prediction for pair ({}, {})", self.view_ids[src], self.view_ids[tgt])))
    }
}

/// Poses, fused pointmaps and scales of the aligned views.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    /// Estimated cameras; entry 0 is the reference and has the identity pose.
    pub cameras: Vec<CameraView>,
    /// World-frame fused pointmaps, tagged with the reference view id.
    pub fused: Vec<Pointmap>,
    /// Scale applied to predictions expressed in each camera's frame.
    pub scales: Vec<f64>,
}

impl AlignmentState {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn reference(&self) -> &CameraView {
        &self.cameras[0]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.cameras.len();
        if k == 0 || self.fused.len() != k || self.scales.len() != k {
            return Err(Error::contract("alignment state needs one camera, pointmap and scale per view"));
        }
        if self.cameras[0].pose.rotation_error(&Pose::identity()) > 0.0 || self.cameras[0].pose.translation().norm() > 0.0 {
            return Err(Error::contract("reference pose must be the identity"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::contract("scales must be positive"));
        }
        for (cam, pm) in self.cameras.iter().zip(&self.fused) {
            if pm.width != cam.width || pm.height != cam.height {
                return Err(Error::contract(format!("fused pointmap of view {} has the wrong size", cam.view_id)));
            }
        }
        Ok(())
    }
}

/// Gradient of the regression loss. Pose entries are with respect to the
/// left increment used by [`Pose::retract`]; reference entries stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionGradient {
    pub fused: Vec<Vec<Vector3<f64>>>,
    pub rotation: Vec<Vector3<f64>>,
    pub translation: Vec<Vector3<f64>>,
    pub log_scale: Vec<f64>,
}

struct Term {
    m: usize,
    n: usize,
    i: usize,
    coef: f64,
    residual: Vector3<f64>,
    c_bar: Vector3<f64>,
}

fn check_inputs(state: &AlignmentState, preds: &PredictionSet, masks: &[MaskGrid]) -> Result<()> {
    state.validate()?;
    let k = state.len();
    if preds.len() != k || masks.len() != k {
        return Err(Error::contract(format!(
            "{k} views need {k} masks and a {k}-view prediction set, got {} and {}",
            masks.len(),
            preds.len()
        )));
    }
    for (a, (cam, mask)) in state.cameras.iter().zip(masks).enumerate() {
        if preds.view_ids()[a] != cam.view_id {
            return Err(Error::contract("prediction set and state list views in different orders"));
        }
        if mask.width() != cam.width || mask.height() != cam.height {
            return Err(Error::contract(format!("mask of view {} has the wrong size", cam.view_id)));
        }
    }
    Ok(())
}

fn visit_terms(state: &AlignmentState, preds: &PredictionSet, masks: &[MaskGrid], mut f: impl FnMut(&Term)) -> Result<()> {
    check_inputs(state, preds, masks)?;
    let k = state.len();
    let share = 1.0 / k as f64;
    for m in 0..k {
        let fused = &state.fused[m];
        let mask = masks[m].values();
        for n in 0..k {
            let pred = preds.get(m, n)?;
            if pred.pointmap.points.len() != fused.points.len() {
                return Err(Error::contract(format!("prediction ({m}, {n}) has the wrong size")));
            }
            let pose = &state.cameras[n].pose;
            let (rot, t) = (pose.rotation(), pose.translation());
            let sigma = state.scales[n];
            for i in 0..fused.points.len() {
                if !fused.valid[i] || !pred.pointmap.valid[i] {
                    continue;
                }
                let mv = mask[i];
                let coef = pred.confidence[i] * ((1.0 - mv) * share + if n == 0 { mv } else { 0.0 });
                if coef == 0.0 {
                    continue;
                }
                let c_bar = pred.pointmap.points[i] * sigma;
                let world = rot.transpose() * (c_bar - t);
                f(&Term {
                    m,
                    n,
                    i,
                    coef,
                    residual: fused.points[i] - world,
                    c_bar,
                });
            }
        }
    }
    Ok(())
}

/// Masked multi-view regression loss of `state`.
pub fn regression_loss(state: &AlignmentState, preds: &PredictionSet, masks: &[MaskGrid]) -> Result<f64> {
    let mut total = 0.0;
    visit_terms(state, preds, masks, |t| total += t.coef * rho(t.residual.norm_squared()))?;
    Ok(total)
}

/// Loss and its gradient with respect to fused points, poses and log scales.
pub fn regression_gradient(state: &AlignmentState, preds: &PredictionSet, masks: &[MaskGrid]) -> Result<(f64, RegressionGradient)> {
    let k = state.len();
    let mut grad = RegressionGradient {
        fused: state.fused.iter().map(|p| vec![Vector3::zeros(); p.points.len()]).collect(),
        rotation: vec![Vector3::zeros(); k],
        translation: vec![Vector3::zeros(); k],
        log_scale: vec![0.0; k],
    };
    let rots: Vec<Matrix3<f64>> = state.cameras.iter().map(|c| c.pose.rotation()).collect();
    let mut total = 0.0;
    visit_terms(state, preds, masks, |t| {
        let r2 = t.residual.norm_squared();
        total += t.coef * rho(r2);
        let g = t.residual * (t.coef * rho_scale(r2));
        grad.fused[t.m][t.i] += g;
        if t.n != 0 {
            let h = rots[t.n] * g;
            grad.rotation[t.n] += t.c_bar.cross(&h);
            grad.translation[t.n] += h;
            grad.log_scale[t.n] -= t.c_bar.dot(&h);
        }
    })?;
    Ok((total, grad))
}

/// How the optimizer moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignMethod {
    /// Reweighted Levenberg-Marquardt on the smoothed norms; only steps that
    /// lower the loss are taken.
    Irls,
    /// Constant-step gradient descent keeping the best iterate.
    GradientDescent,
}

/// Starting poses for the non-reference views.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseInit {
    /// Similarity fit between each view's self prediction and its prediction
    /// in the reference frame, on unmasked pixels.
    Procrustes,
    /// World-to-camera poses relative to the reference, one per view
    /// (entry 0 ignored); scales start at 1.
    Given(Vec<Pose>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub iters: usize,
    pub lr: f64,
    /// Provider noise, used by callers that build a synthetic provider.
    pub noise_sigma: f64,
    pub seed: u64,
    pub method: AlignMethod,
    pub init: PoseInit,
    /// Keep poses and scales at their initial values.
    pub freeze_poses: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 0.01,
            noise_sigma: 0.0,
            seed: 0,
            method: AlignMethod::Irls,
            init: PoseInit::Procrustes,
            freeze_poses: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("align lr must be > 0, got {}", self.lr)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Result of [`global_align`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutcome {
    pub state: AlignmentState,
    /// Mask per view used by the loss (reference mask, then its warps).
    pub masks: Vec<MaskGrid>,
    /// Loss before optimization and after every accepted step.
    pub loss_trace: Vec<f64>,
}

impl AlignOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().unwrap()
    }
}

/// Warps the reference mask into every view through the provider's
/// prediction of the reference pixels in that view's frame.
pub fn warped_masks(edit_mask: &MaskGrid, views: &[CameraView], preds: &PredictionSet) -> Result<Vec<MaskGrid>> {
    let mut out = Vec::with_capacity(views.len());
    out.push(edit_mask.clone());
    for (b, cam) in views.iter().enumerate().skip(1) {
        let pred = preds.get(0, b)?;
        out.push(warp_mask(edit_mask, &pred.pointmap, cam, cam)?);
    }
    Ok(out)
}

/// Aligns `views` (reference first) from the provider's pair predictions.
pub fn global_align<P: PointmapProvider + ?Sized>(
    views: &[CameraView],
    provider: &P,
    edit_mask: &MaskGrid,
    cfg: &AlignConfig,
) -> Result<AlignOutcome> {
    if views.len() < 2 {
        return Err(Error::invalid(format!("alignment needs the reference and at least one other view, got {}", views.len())));
    }
    let r = &views[0];
    if edit_mask.width() != r.width || edit_mask.height() != r.height {
        return Err(Error::contract("edit mask resolution does not match the reference view"));
    }
    let ids: Vec<usize> = views.iter().map(|c| c.view_id).collect();
    let preds = PredictionSet::collect(&ids, provider)?;
    let masks = warped_masks(edit_mask, views, &preds)?;
    align_predictions(views, &preds, &masks, cfg)
}

/// Optimizes the alignment for fixed predictions and masks.
pub fn align_predictions(views: &[CameraView], preds: &PredictionSet, masks: &[MaskGrid], cfg: &AlignConfig) -> Result<AlignOutcome> {
    cfg.validate()?;
    let problem = Problem::new(views, preds, masks)?;
    let start = problem.initial_params(&cfg.init)?;
    let (params, loss_trace) = match cfg.method {
        AlignMethod::Irls => problem.run_lm(start, cfg)?,
        AlignMethod::GradientDescent => problem.run_gd(start, cfg)?,
    };
    let state = problem.state(&params)?;
    if let (Some(first), Some(last)) = (loss_trace.first(), loss_trace.last()) {
        if last > first {
            return Err(Error::OptimizationFailure {
                iteration: loss_trace.len() - 1,
                reason: format!("final loss {last} exceeds initial {first}"),
            });
        }
    }
    Ok(AlignOutcome {
        state,
        masks: masks.to_vec(),
        loss_trace,
    })
}

/// Least-squares similarity `dst ≈ s·R·src + t`.
pub fn similarity_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return None;
    }
    let inv = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (a, b) = (a - mu_s, b - mu_d);
        cov += b * a.transpose();
        var += a.norm_squared();
    }
    cov *= inv;
    var *= inv;
    if var <= 0.0 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var;
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    Some((scale, rot, mu_d - rot * mu_s * scale))
}

#[derive(Debug, Clone)]
struct Params {
    depth: Vec<Vec<f64>>,
    poses: Vec<Pose>,
    log_scale: Vec<f64>,
}

struct Problem<'a> {
    views: &'a [CameraView],
    preds: &'a PredictionSet,
    masks: &'a [MaskGrid],
    rays: Vec<Vec<Vector3<f64>>>,
    valid: Vec<Vec<bool>>,
}

/// Normal equations of one reweighted linearization, depths kept per pixel.
struct NormalEquations {
    h_dd: Vec<f64>,
    h_dy: Vec<DVector<f64>>,
    b_d: Vec<f64>,
    h_yy: DMatrix<f64>,
    b_y: DVector<f64>,
    pixel: Vec<(usize, usize)>,
}

impl<'a> Problem<'a> {
    fn new(views: &'a [CameraView], preds: &'a PredictionSet, masks: &'a [MaskGrid]) -> Result<Self> {
        let k = views.len();
        if k == 0 || preds.len() != k || masks.len() != k {
            return Err(Error::contract("views, predictions and masks disagree in count"));
        }
        let mut rays = Vec::with_capacity(k);
        let mut valid = Vec::with_capacity(k);
        for (a, cam) in views.iter().enumerate() {
            if preds.view_ids()[a] != cam.view_id {
                return Err(Error::contract("prediction set and views list views in different orders"));
            }
            let own = preds.get(a, a)?;
            if own.pointmap.width != cam.width || own.pointmap.height != cam.height {
                return Err(Error::contract(format!("self prediction of view {} has the wrong size", cam.view_id)));
            }
            let mut r = Vec::with_capacity(cam.width * cam.height);
            for v in 0..cam.height {
                for u in 0..cam.width {
                    r.push(cam.intrinsics.ray(u as f64, v as f64));
                }
            }
            rays.push(r);
            valid.push(own.pointmap.valid.clone());
        }
        Ok(Self {
            views,
            preds,
            masks,
            rays,
            valid,
        })
    }

    fn k(&self) -> usize {
        self.views.len()
    }

    fn n_params(&self, freeze: bool) -> usize {
        if freeze {
            0
        } else {
            7 * (self.k() - 1)
        }
    }

    fn initial_params(&self, init: &PoseInit) -> Result<Params> {
        let k = self.k();
        let mut poses = vec![Pose::identity(); k];
        let mut log_scale = vec![0.0; k];
        match init {
            PoseInit::Given(given) => {
                if given.len() != k {
                    return Err(Error::Config(format!("{} initial poses given for {k} views", given.len())));
                }
                poses[1..].clone_from_slice(&given[1..]);
            }
            PoseInit::Procrustes => {
                for b in 1..k {
                    let in_ref = &self.preds.get(b, 0)?.pointmap;
                    let own = &self.preds.get(b, b)?.pointmap;
                    let mask = self.masks[b].values();
                    let pick = |unmasked_only: bool| -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
                        (0..own.points.len())
                            .filter(|&i| own.valid[i] && in_ref.valid[i] && (!unmasked_only || mask[i] < 0.5))
                            .map(|i| (in_ref.points[i], own.points[i]))
                            .unzip()
                    };
                    let (mut src, mut dst) = pick(true);
                    if src.len() < 3 {
                        (src, dst) = pick(false);
                    }
                    let (s, rot, t) = similarity_fit(&src, &dst).ok_or_else(|| {
                        Error::OptimizationFailure {
                            iteration: 0,
                            reason: format!("cannot initialize the pose of view {}", self.views[b].view_id),
                        }
                    })?;
                    let rot = nalgebra::Rotation3::from_matrix_unchecked(rot);
                    let iso = nalgebra::Isometry3::from_parts(
                        nalgebra::Translation3::from(t / s),
                        nalgebra::UnitQuaternion::from_rotation_matrix(&rot),
                    );
                    poses[b] = Pose::from_isometry(iso);
                    log_scale[b] = -math::ln(s);
                }
            }
        }
        let mut depth = Vec::with_capacity(k);
        for a in 0..k {
            let own = &self.preds.get(a, a)?.pointmap;
            let sigma = math::exp(log_scale[a]);
            depth.push(
                own.points
                    .iter()
                    .zip(&own.valid)
                    .map(|(p, &ok)| if ok { sigma * p.z } else { 0.0 })
                    .collect(),
            );
        }
        Ok(Params { depth, poses, log_scale })
    }

    fn state(&self, p: &Params) -> Result<AlignmentState> {
        let k = self.k();
        let world = self.views[0].view_id;
        let mut cameras = Vec::with_capacity(k);
        let mut fused = Vec::with_capacity(k);
        for a in 0..k {
            let cam = &self.views[a];
            cameras.push(CameraView::new(cam.view_id, p.poses[a], cam.intrinsics, cam.width, cam.height)?);
            let (rot, t) = (p.poses[a].rotation(), p.poses[a].translation());
            let points = (0..self.rays[a].len())
                .map(|i| {
                    if self.valid[a][i] {
                        rot.transpose() * (self.rays[a][i] * p.depth[a][i] - t)
                    } else {
                        Vector3::zeros()
                    }
                })
                .collect();
            fused.push(Pointmap::new(world, cam.width, cam.height, points, self.valid[a].clone())?);
        }
        Ok(AlignmentState {
            cameras,
            fused,
            scales: p.log_scale.iter().map(|&l| math::exp(l)).collect(),
        })
    }

    fn loss(&self, p: &Params) -> Result<f64> {
        regression_loss(&self.state(p)?, self.preds, self.masks)
    }

    /// Calls `f(m, i, n, coef, r, J_d, blocks)` for every term. Blocks are
    /// Jacobians of the residual with respect to the 7 parameters
    /// `(ω, v, log σ)` of the listed views.
    fn linearize(&self, p: &Params, freeze: bool, mut f: impl FnMut(usize, usize, f64, &Vector3<f64>, &Vector3<f64>, &[(usize, Block)])) -> Result<()> {
        let k = self.k();
        let share = 1.0 / k as f64;
        let rots: Vec<Matrix3<f64>> = p.poses.iter().map(|q| q.rotation()).collect();
        let trans: Vec<Vector3<f64>> = p.poses.iter().map(|q| q.translation()).collect();
        let sigmas: Vec<f64> = p.log_scale.iter().map(|&l| math::exp(l)).collect();
        let preds: Vec<&PairwisePrediction> = (0..k * k).map(|j| self.preds.get(j / k, j % k)).collect::<Result<_>>()?;
        let mut blocks: Vec<(usize, Block)> = Vec::with_capacity(2);
        for m in 0..k {
            let mask = self.masks[m].values();
            let rmt = rots[m].transpose();
            for i in 0..self.rays[m].len() {
                if !self.valid[m][i] {
                    continue;
                }
                let c = self.rays[m][i] * p.depth[m][i];
                let x = rmt * (c - trans[m]);
                let j_d = rmt * self.rays[m][i];
                for n in 0..k {
                    let pred = preds[m * k + n];
                    if !pred.pointmap.valid[i] {
                        continue;
                    }
                    let mv = mask[i];
                    let coef = pred.confidence[i] * ((1.0 - mv) * share + if n == 0 { mv } else { 0.0 });
                    if coef == 0.0 {
                        continue;
                    }
                    let rnt = rots[n].transpose();
                    let c_bar = pred.pointmap.points[i] * sigmas[n];
                    let r = x - rnt * (c_bar - trans[n]);
                    blocks.clear();
                    if !freeze {
                        if m != 0 {
                            let mut b = Block::zeros();
                            b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rmt * c.cross_matrix()));
                            b.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rmt));
                            blocks.push((m, b));
                        }
                        if n != 0 {
                            let mut b = Block::zeros();
                            b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rnt * c_bar.cross_matrix()));
                            b.fixed_view_mut::<3, 3>(0, 3).copy_from(&rnt);
                            b.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-rnt * c_bar));
                            match blocks.iter_mut().find(|(v, _)| *v == n) {
                                Some((_, existing)) => *existing += b,
                                None => blocks.push((n, b)),
                            }
                        }
                    }
                    f(m, i, coef, &r, &j_d, &blocks);
                }
            }
        }
        Ok(())
    }

    fn normal_equations(&self, p: &Params, freeze: bool) -> Result<NormalEquations> {
        let np = self.n_params(freeze);
        let mut eq = NormalEquations {
            h_dd: Vec::new(),
            h_dy: Vec::new(),
            b_d: Vec::new(),
            h_yy: DMatrix::zeros(np, np),
            b_y: DVector::zeros(np),
            pixel: Vec::new(),
        };
        self.linearize(p, freeze, |m, i, coef, r, j_d, blocks| {
            if eq.pixel.last() != Some(&(m, i)) {
                eq.pixel.push((m, i));
                eq.h_dd.push(0.0);
                eq.h_dy.push(DVector::zeros(np));
                eq.b_d.push(0.0);
            }
            let last = eq.pixel.len() - 1;
            let w = coef * rho_scale(r.norm_squared());
            eq.h_dd[last] += w * j_d.norm_squared();
            eq.b_d[last] += w * j_d.dot(r);
            for (a, (va, ba)) in blocks.iter().enumerate() {
                let oa = 7 * (va - 1);
                let jd_b = ba.transpose() * j_d * w;
                let mut row = eq.h_dy[last].rows_mut(oa, 7);
                row += jd_b;
                let mut by = eq.b_y.rows_mut(oa, 7);
                by += ba.transpose() * r * w;
                for (vb, bb) in blocks.iter().skip(a) {
                    let ob = 7 * (vb - 1);
                    let h = ba.transpose() * bb * w;
                    let mut hv = eq.h_yy.view_mut((oa, ob), (7, 7));
                    hv += h;
                    if oa != ob {
                        let mut hvt = eq.h_yy.view_mut((ob, oa), (7, 7));
                        hvt += h.transpose();
                    }
                }
            }
        })?;
        Ok(eq)
    }

    /// Damped step from `eq`, depths eliminated by the Schur complement.
    fn solve(&self, eq: &NormalEquations, lambda: f64) -> Option<(Vec<f64>, DVector<f64>)> {
        let np = eq.b_y.len();
        let damp = |h: f64| h * (1.0 + lambda) + 1e-12;
        let mut s = eq.h_yy.clone();
        for j in 0..np {
            s[(j, j)] = damp(s[(j, j)]);
        }
        let mut g = eq.b_y.clone();
        if np > 0 {
            for p in 0..eq.pixel.len() {
                let hdd = damp(eq.h_dd[p]);
                let v = &eq.h_dy[p];
                s.ger(-1.0 / hdd, v, v, 1.0);
                g.axpy(-eq.b_d[p] / hdd, v, 1.0);
            }
        }
        let dy = if np > 0 {
            let chol = s.cholesky()?;
            -chol.solve(&g)
        } else {
            DVector::zeros(0)
        };
        let dd = (0..eq.pixel.len())
            .map(|p| -(eq.b_d[p] + eq.h_dy[p].dot(&dy)) / damp(eq.h_dd[p]))
            .collect();
        if !dy.iter().all(|x| x.is_finite()) {
            return None;
        }
        Some((dd, dy))
    }

    fn apply(&self, p: &Params, eq_pixels: &[(usize, usize)], dd: &[f64], dy: &DVector<f64>) -> Params {
        let mut out = p.clone();
        for (&(m, i), &d) in eq_pixels.iter().zip(dd) {
            out.depth[m][i] += d;
        }
        for b in 1..self.k() {
            if dy.len() < 7 * b {
                break;
            }
            let o = 7 * (b - 1);
            let omega = Vector3::new(dy[o], dy[o + 1], dy[o + 2]);
            let v = Vector3::new(dy[o + 3], dy[o + 4], dy[o + 5]);
            out.poses[b] = p.poses[b].retract(&omega, &v);
            out.log_scale[b] += dy[o + 6];
        }
        out
    }

    fn run_lm(&self, mut p: Params, cfg: &AlignConfig) -> Result<(Params, Vec<f64>)> {
        let mut loss = self.loss(&p)?;
        if !loss.is_finite() {
            return Err(Error::OptimizationFailure {
                iteration: 0,
                reason: "initial loss is not finite".into(),
            });
        }
        let mut trace = vec![loss];
        let mut lambda = 1e-4;
        'outer: for _ in 0..cfg.iters {
            if loss == 0.0 {
                break;
            }
            let eq = self.normal_equations(&p, cfg.freeze_poses)?;
            loop {
                if let Some((dd, dy)) = self.solve(&eq, lambda) {
                    let cand = self.apply(&p, &eq.pixel, &dd, &dy);
                    let l = self.loss(&cand)?;
                    if l.is_finite() && l < loss {
                        let gain = loss - l;
                        p = cand;
                        loss = l;
                        trace.push(loss);
                        lambda = (lambda * 0.1).max(1e-12);
                        if gain <= 1e-15 * loss {
                            break 'outer;
                        }
                        break;
                    }
                }
                lambda *= 10.0;
                if lambda > 1e12 {
                    break 'outer;
                }
            }
        }
        Ok((p, trace))
    }

    fn run_gd(&self, mut p: Params, cfg: &AlignConfig) -> Result<(Params, Vec<f64>)> {
        let np = self.n_params(cfg.freeze_poses);
        let mut loss = self.loss(&p)?;
        let mut trace = vec![loss];
        let mut best = (loss, p.clone());
        for it in 0..cfg.iters {
            let mut g_depth: Vec<Vec<f64>> = p.depth.iter().map(|d| vec![0.0; d.len()]).collect();
            let mut g_y = DVector::<f64>::zeros(np);
            self.linearize(&p, cfg.freeze_poses, |m, i, coef, r, j_d, blocks| {
                let g = r * (coef * rho_scale(r.norm_squared()));
                g_depth[m][i] += j_d.dot(&g);
                for (v, b) in blocks {
                    let mut gy = g_y.rows_mut(7 * (v - 1), 7);
                    gy += b.transpose() * g;
                }
            })?;
            let pixels: Vec<(usize, usize)> = (0..self.k())
                .flat_map(|m| (0..self.rays[m].len()).map(move |i| (m, i)))
                .filter(|&(m, i)| self.valid[m][i])
                .collect();
            let dd: Vec<f64> = pixels.iter().map(|&(m, i)| -cfg.lr * g_depth[m][i]).collect();
            p = self.apply(&p, &pixels, &dd, &(-g_y * cfg.lr));
            let finite = p.log_scale.iter().all(|l| l.is_finite() && math::exp(*l) > 0.0)
                && p.depth.iter().flatten().all(|d| d.is_finite());
            loss = if finite { self.loss(&p)? } else { f64::NAN };
            if !loss.is_finite() {
                return Err(Error::OptimizationFailure {
                    iteration: it + 1,
                    reason: "loss became non-finite".into(),
                });
            }
            if loss < best.0 {
                best = (loss, p.clone());
            }
            trace.push(best.0);
        }
        Ok((best.1, trace))
    }
}

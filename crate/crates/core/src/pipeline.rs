//! End-to-end propagation of a reference-view drag edit over a synthetic
//! scene, the independent per-view baseline, fused reconstruction and the
//! inversion-strength sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::alignment::{global_align, AlignConfig, AlignOutcome, AlignmentState, SyntheticProvider};
use crate::diffusion::{
    ddim_denoise, ddim_invert, make_schedule, step_for_strength, Decoder, Denoiser, LatentCodec, Schedule, ToyDenoiser,
    DEFAULT_T_E, DEFAULT_T_R, DEFAULT_T_TOTAL,
};
use crate::drag::{drag_edit, reinvert_edited, DragConfig, DragResult, EditSpec};
use crate::geometry::{warp_mask, CameraView, Pointmap};
use crate::grid::{Image, LatentGrid, MaskGrid};
use crate::latent_field::{build_attributed_cloud, AttributedPointCloud};
use crate::metrics::{consistency_metrics, ConsistencyReport, MetricView};
use crate::mvopt::{edit_view, LossRecord, MVOptConfig};
use crate::rng::derive_seed;
use crate::scene::SyntheticScene;
use crate::{Error, Result};

/// Runs independent jobs, returning results in input order.
pub trait Executor {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        items.into_iter().map(f).collect()
    }
}

/// Everything the pipeline needs besides the scene and the edit.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub t_total: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Inversion strength of the drag edit, `t_e = round(eta_e · t_total)`.
    pub eta_e: f64,
    /// Inversion strength of propagation, `t_r = round(eta_r · t_total)`.
    pub eta_r: f64,
    pub denoiser: ToyDenoiser,
    pub latent_channels: usize,
    pub latent_stride: usize,
    pub drag: DragConfig,
    pub align: AlignConfig,
    /// Original views aligned together with the edited reference.
    pub aux_views: usize,
    pub mvopt: MVOptConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_total: DEFAULT_T_TOTAL,
            beta_min: 1e-4,
            beta_max: 0.02,
            eta_e: DEFAULT_T_E as f64 / DEFAULT_T_TOTAL as f64,
            eta_r: DEFAULT_T_R as f64 / DEFAULT_T_TOTAL as f64,
            denoiser: ToyDenoiser::Linear {
                a: ToyDenoiser::DEFAULT_LINEAR_A,
            },
            latent_channels: 4,
            latent_stride: 8,
            drag: DragConfig {
                lr: 0.1,
                ..DragConfig::default()
            },
            align: AlignConfig::default(),
            aux_views: 4,
            mvopt: MVOptConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings for the small synthetic scenes: latent stride 2, so a
    /// 48-pixel view keeps a 24-pixel latent.
    pub fn harness() -> Self {
        Self {
            latent_stride: 2,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.t_total, self.beta_min, self.beta_max)?.with_strengths(self.eta_e, self.eta_r)
    }

    pub fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::seeded_linear(self.latent_channels, self.latent_stride, derive_seed(self.seed, 0xc0dec))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.codec()?;
        self.align.validate()?;
        self.mvopt.validate()?;
        if self.aux_views == 0 {
            return Err(Error::Config("alignment needs at least one auxiliary view".into()));
        }
        if !(self.drag.lr.is_finite() && self.drag.lr > 0.0) {
            return Err(Error::Config(format!("drag lr must be > 0, got {}", self.drag.lr)));
        }
        Ok(())
    }
}

/// One view of the edited scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutput {
    pub view_id: usize,
    /// Decode of the unedited inversion: what the view looks like when
    /// nothing is changed.
    pub round_trip: Image,
    pub edited_image: Image,
    pub initial_latent: LatentGrid,
    pub optimized_latent: LatentGrid,
    pub loss_trace: Vec<LossRecord>,
    /// Edit mask seen by this view at latent resolution.
    pub mask_map: MaskGrid,
    pub uncovered: bool,
}

/// Fused colour point cloud standing in for a radiance-field fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    /// Per-point colour variance across observing views, averaged over
    /// channels.
    pub variance: Vec<f64>,
    pub observations: Vec<usize>,
}

/// Output of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct EditedScene {
    pub scene_id: String,
    pub spec: EditSpec,
    /// Mask actually propagated: the user mask, or empty when the drag
    /// changed nothing.
    pub effective_mask: MaskGrid,
    pub drag: DragResult,
    pub alignment: AlignOutcome,
    pub cloud: AttributedPointCloud,
    /// Every scene camera, posed relative to the reference.
    pub cameras: Vec<CameraView>,
    pub views: Vec<ViewOutput>,
    pub reconstruction: ColoredCloud,
}

impl EditedScene {
    pub fn ref_view(&self) -> usize {
        self.spec.ref_view
    }

    /// Consistency of `images` (one per scene view, e.g. this run's output
    /// or a baseline) measured through this run's cloud.
    pub fn score(&self, images: &[Image], cfg: &PipelineConfig) -> Result<ConsistencyReport> {
        if images.len() != self.views.len() {
            return Err(Error::contract(format!("{} images for a {}-view scene", images.len(), self.views.len())));
        }
        let unedited: Vec<Image> = self.views.iter().map(|v| v.round_trip.clone()).collect();
        score_views(&self.cameras, images, &unedited, self.ref_view(), &self.cloud, cfg)
    }

    pub fn report(&self, cfg: &PipelineConfig) -> Result<ConsistencyReport> {
        let images: Vec<Image> = self.views.iter().map(|v| v.edited_image.clone()).collect();
        self.score(&images, cfg)
    }
}

fn score_views(
    cameras: &[CameraView],
    edited: &[Image],
    unedited: &[Image],
    ref_view: usize,
    cloud: &AttributedPointCloud,
    cfg: &PipelineConfig,
) -> Result<ConsistencyReport> {
    let views: Vec<MetricView<'_>> = cameras
        .iter()
        .zip(edited.iter().zip(unedited))
        .map(|(cam, (edited, unedited))| MetricView { cam, edited, unedited })
        .collect();
    consistency_metrics(&views, ref_view, cloud, &cfg.codec()?, cfg.mvopt.mask_threshold)
}

/// Intermediate results handed out as soon as they exist.
#[derive(Debug, Clone, Copy)]
pub enum Artifact<'a> {
    EditedReference(&'a DragResult),
    Aligned(&'a AlignOutcome),
    Cloud(&'a AttributedPointCloud),
    View(&'a ViewOutput),
    Reconstruction(&'a ColoredCloud),
}

pub trait PipelineObserver {
    fn artifact(&mut self, artifact: Artifact<'_>);
}

impl PipelineObserver for () {
    fn artifact(&mut self, _: Artifact<'_>) {}
}

/// `count` views spread evenly over the scene, skipping the reference.
pub fn select_aux_views(n_views: usize, ref_view: usize, count: usize) -> Vec<usize> {
    let others: Vec<usize> = (0..n_views).filter(|&v| v != ref_view).collect();
    if count >= others.len() {
        return others;
    }
    let mut picked: Vec<usize> = (0..count)
        .map(|j| {
            let pos = if count == 1 {
                (others.len() - 1) as f64 / 2.0
            } else {
                j as f64 * (others.len() - 1) as f64 / (count - 1) as f64
            };
            others[crate::math::round(pos) as usize]
        })
        .collect();
    picked.dedup();
    picked
}

/// Every scene camera re-posed so the reference camera is the identity.
pub fn relative_cameras(scene: &SyntheticScene, ref_view: usize) -> Vec<CameraView> {
    let anchor = scene.views[ref_view].pose;
    scene.views.iter().map(|c| c.relative_to(&anchor)).collect()
}

fn round_trip<D: Denoiser + ?Sized, C: Decoder + ?Sized>(z: &LatentGrid, den: &D, sched: &Schedule, codec: &C) -> Result<Image> {
    Ok(codec.decode(&ddim_denoise(z, den, sched, z.timestep, 0)?))
}

/// Drag result and alignment, the parts of a run that do not depend on `t_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditedReference {
    pub drag: DragResult,
    pub effective_mask: MaskGrid,
    pub alignment: AlignOutcome,
    pub cameras: Vec<CameraView>,
}

/// Drags the reference view, then aligns it with the auxiliary views.
pub fn edit_and_align<D: Denoiser + ?Sized>(
    scene: &SyntheticScene,
    spec: &EditSpec,
    cfg: &PipelineConfig,
    den: &D,
    observer: &mut dyn PipelineObserver,
) -> Result<EditedReference> {
    cfg.validate()?;
    let r = spec.ref_view;
    if r >= scene.views.len() {
        return Err(Error::contract(format!("reference view {r} not in a {}-view scene", scene.views.len())));
    }
    let sched = cfg.schedule()?;
    let codec = cfg.codec()?;
    let drag = drag_edit(&scene.images[r], spec, den, &sched, &codec, &cfg.drag).map_err(|e| e.in_stage("drag"))?;
    observer.artifact(Artifact::EditedReference(&drag));
    align_reference(scene, spec, drag, cfg, observer)
}

/// Aligns an already dragged reference with the auxiliary views.
pub fn align_reference(
    scene: &SyntheticScene,
    spec: &EditSpec,
    drag: DragResult,
    cfg: &PipelineConfig,
    observer: &mut dyn PipelineObserver,
) -> Result<EditedReference> {
    cfg.validate()?;
    let n = scene.views.len();
    let r = spec.ref_view;
    if r >= n {
        return Err(Error::contract(format!("reference view {r} not in a {n}-view scene")));
    }
    let ref_cam = &scene.views[r];
    let effective_mask = if drag.changed() {
        spec.mask.clone()
    } else {
        MaskGrid::zeros(ref_cam.height, ref_cam.width)
    };
    let cameras = relative_cameras(scene, r);
    let mut order = vec![r];
    order.extend(select_aux_views(n, r, cfg.aux_views));
    let align_views: Vec<CameraView> = order.iter().map(|&v| cameras[v].clone()).collect();
    let mut provider = SyntheticProvider::new(scene.views.clone(), scene.geometry.clone(), cfg.align.noise_sigma, cfg.align.seed)
        .map_err(|e| e.in_stage("align"))?;
    if drag.changed() {
        provider = provider
            .with_edit(r, scene.edited_geometry(), effective_mask.clone())
            .map_err(|e| e.in_stage("align"))?;
    }
    let alignment = global_align(&align_views, &provider, &effective_mask, &cfg.align).map_err(|e| e.in_stage("align"))?;
    observer.artifact(Artifact::Aligned(&alignment));
    Ok(EditedReference {
        drag,
        effective_mask,
        alignment,
        cameras,
    })
}

/// Builds the cloud from `reference_latent` and edits every non-reference
/// view against it.
pub fn propagate<D: Denoiser + Sync + ?Sized, E: Executor>(
    scene: &SyntheticScene,
    edited: &EditedReference,
    reference_latent: &LatentGrid,
    sched: &Schedule,
    cfg: &PipelineConfig,
    den: &D,
    exec: &E,
    observer: &mut dyn PipelineObserver,
) -> Result<(AttributedPointCloud, Vec<ViewOutput>)> {
    let codec = cfg.codec()?;
    let r = edited.alignment.state.reference().view_id;
    let cloud = build_attributed_cloud(&edited.alignment.state, reference_latent, &edited.effective_mask)
        .map_err(|e| e.in_stage("cloud"))?;
    observer.artifact(Artifact::Cloud(&cloud));

    let jobs: Vec<usize> = (0..scene.views.len()).collect();
    let results = exec.map(jobs, |v| -> Result<ViewOutput> {
        let image = &scene.images[v];
        if v == r {
            let z_init = ddim_invert(&codec.encode(image)?, den, sched, sched.t_r())?;
            return Ok(ViewOutput {
                view_id: v,
                round_trip: round_trip(&z_init, den, sched, &codec)?,
                edited_image: edited.drag.edited_image.clone(),
                initial_latent: z_init,
                optimized_latent: reference_latent.clone(),
                loss_trace: Vec::new(),
                mask_map: edited.effective_mask.downsample_mean(codec.stride())?,
                uncovered: false,
            });
        }
        let res = edit_view(image, &cloud, &edited.cameras[v], den, sched, &codec, &cfg.mvopt)?;
        Ok(ViewOutput {
            view_id: v,
            round_trip: round_trip(&res.initial_latent, den, sched, &codec)?,
            edited_image: res.edited_image,
            initial_latent: res.initial_latent,
            optimized_latent: res.optimized_latent,
            loss_trace: res.loss_trace,
            mask_map: res.maps.mask_map,
            uncovered: res.uncovered,
        })
    });
    let mut views = Vec::with_capacity(results.len());
    for res in results {
        let view = res.map_err(|e| e.in_stage("propagate"))?;
        observer.artifact(Artifact::View(&view));
        views.push(view);
    }
    Ok((cloud, views))
}

/// Full run: drag, align, build the cloud, propagate, reconstruct.
pub fn run_pipeline<D: Denoiser + Sync + ?Sized, E: Executor>(
    scene: &SyntheticScene,
    spec: &EditSpec,
    cfg: &PipelineConfig,
    den: &D,
    exec: &E,
    observer: &mut dyn PipelineObserver,
) -> Result<EditedScene> {
    let edited = edit_and_align(scene, spec, cfg, den, observer)?;
    finish_pipeline(scene, spec, edited, cfg, den, exec, observer)
}

/// Propagation and reconstruction for an aligned reference edit.
pub fn finish_pipeline<D: Denoiser + Sync + ?Sized, E: Executor>(
    scene: &SyntheticScene,
    spec: &EditSpec,
    edited: EditedReference,
    cfg: &PipelineConfig,
    den: &D,
    exec: &E,
    observer: &mut dyn PipelineObserver,
) -> Result<EditedScene> {
    let sched = cfg.schedule()?;
    let reference_latent = edited.drag.reference_latent_tr.clone();
    let (cloud, views) = propagate(scene, &edited, &reference_latent, &sched, cfg, den, exec, observer)?;

    let state = &edited.alignment.state;
    let aligned_images: Vec<Image> = state.cameras.iter().map(|c| views[c.view_id].edited_image.clone()).collect();
    let reconstruction = reconstruct_scene(&aligned_images, state).map_err(|e| e.in_stage("reconstruct"))?;
    observer.artifact(Artifact::Reconstruction(&reconstruction));
    Ok(EditedScene {
        scene_id: scene.scene_id.clone(),
        spec: spec.clone(),
        effective_mask: edited.effective_mask,
        drag: edited.drag,
        alignment: edited.alignment,
        cloud,
        cameras: edited.cameras,
        views,
        reconstruction,
    })
}

/// Relative depth tolerance when deciding that a fused point is the surface
/// another view sees.
const VISIBILITY_REL_TOL: f64 = 0.02;

/// Fuses the aligned views' pointmaps into one cloud coloured by the mean of
/// the edited images over the views that see each point.
pub fn reconstruct_scene(edited_views: &[Image], aligned: &AlignmentState) -> Result<ColoredCloud> {
    if aligned.is_empty() {
        return Err(Error::contract("alignment holds no views"));
    }
    if edited_views.len() != aligned.len() {
        return Err(Error::contract(format!(
            "{} edited images for {} aligned views",
            edited_views.len(),
            aligned.len()
        )));
    }
    for (img, cam) in edited_views.iter().zip(&aligned.cameras) {
        if img.width() != cam.width || img.height() != cam.height || img.channels() != 3 {
            return Err(Error::contract(format!("edited image of view {} has the wrong shape", cam.view_id)));
        }
    }
    // camera-frame depth of every fused pixel, per view
    let depth: Vec<Vec<f64>> = aligned
        .cameras
        .iter()
        .zip(&aligned.fused)
        .map(|(cam, pm)| pm.points.iter().map(|p| cam.pose.transform_point(p).z).collect())
        .collect();
    let mut out = ColoredCloud {
        positions: Vec::new(),
        colors: Vec::new(),
        variance: Vec::new(),
        observations: Vec::new(),
    };
    for (a, pm) in aligned.fused.iter().enumerate() {
        for (i, p) in pm.points.iter().enumerate() {
            if !pm.valid[i] {
                continue;
            }
            let mut samples: Vec<[f64; 3]> = Vec::new();
            for (b, cam) in aligned.cameras.iter().enumerate() {
                let pixel = if b == a {
                    Some((i / pm.width, i % pm.width))
                } else {
                    let proj = cam.project_world(p);
                    proj.pixel(cam.width, cam.height).filter(|&(v, u)| {
                        let j = v * cam.width + u;
                        aligned.fused[b].valid[j] && (proj.depth - depth[b][j]).abs() <= VISIBILITY_REL_TOL * depth[b][j]
                    })
                };
                if let Some((v, u)) = pixel {
                    let px = edited_views[b].pixel(v, u);
                    samples.push([px[0], px[1], px[2]]);
                }
            }
            let k = samples.len() as f64;
            let mut mean = [0.0; 3];
            for s in &samples {
                for c in 0..3 {
                    mean[c] += s[c] / k;
                }
            }
            let var = samples
                .iter()
                .map(|s| (0..3).map(|c| (s[c] - mean[c]) * (s[c] - mean[c])).sum::<f64>())
                .sum::<f64>()
                / (3.0 * k);
            out.positions.push(*p);
            out.colors.push(mean);
            out.variance.push(var);
            out.observations.push(samples.len());
        }
    }
    Ok(out)
}

/// Where the reference handles and targets land in `cam`, warped through the
/// ground-truth geometry (handles on the original surface, targets on the
/// edited one). `None` when a point leaves the view.
fn warp_points(points: &[(f64, f64)], ref_pm: &Pointmap, ref_cam: &CameraView, cam: &CameraView) -> Option<Vec<(f64, f64)>> {
    let to_world = ref_cam.pose.inverse();
    points
        .iter()
        .map(|&(u, v)| {
            let (ur, vr) = (crate::math::round(u) as usize, crate::math::round(v) as usize);
            let depth = ref_pm.get(vr, ur)?.z;
            let world = to_world.transform_point(&(ref_cam.intrinsics.ray(u, v) * depth));
            let proj = cam.project_world(&world);
            proj.pixel(cam.width, cam.height)?;
            let clamp = |x: f64, hi: usize| x.clamp(0.0, (hi - 1) as f64);
            Some((clamp(proj.u, cam.width), clamp(proj.v, cam.height)))
        })
        .collect()
}

/// Drag-edits every view on its own, with handles, targets and mask warped
/// from the reference through ground-truth geometry. Views where the warp
/// fails keep their unedited round trip. Returns one image per scene view.
pub fn baseline_independent_drag<D: Denoiser + Sync + ?Sized, E: Executor>(
    scene: &SyntheticScene,
    spec: &EditSpec,
    cfg: &PipelineConfig,
    den: &D,
    exec: &E,
) -> Result<Vec<Image>> {
    cfg.validate()?;
    spec.validate()?;
    let r = spec.ref_view;
    if r >= scene.views.len() {
        return Err(Error::contract(format!("reference view {r} not in the scene")));
    }
    let sched = cfg.schedule()?;
    let codec = cfg.codec()?;
    let ref_cam = &scene.views[r];
    let (_, before) = scene.geometry.render(ref_cam);
    let (_, after) = scene.edited_geometry().render(ref_cam);
    let jobs: Vec<usize> = (0..scene.views.len()).collect();
    let results = exec.map(jobs, |v| -> Result<Image> {
        let image = &scene.images[v];
        let cam = &scene.views[v];
        let warped = if v == r {
            Some((spec.handles.clone(), spec.targets.clone(), spec.mask.clone()))
        } else {
            let handles = warp_points(&spec.handles, &before, ref_cam, cam);
            let targets = warp_points(&spec.targets, &after, ref_cam, cam);
            let m1 = warp_mask(&spec.mask, &before, ref_cam, cam)?;
            let m2 = warp_mask(&spec.mask, &after, ref_cam, cam)?;
            let mask = MaskGrid::from_fn(cam.height, cam.width, |y, x| m1.get(y, x).max(m2.get(y, x)));
            handles.zip(targets).map(|(h, t)| (h, t, mask))
        };
        let spec_v = warped.and_then(|(h, t, m)| EditSpec::new(v, m, h, t).ok());
        match spec_v {
            Some(s) => Ok(drag_edit(image, &s, den, &sched, &codec, &cfg.drag)?.edited_image),
            None => {
                let z = ddim_invert(&codec.encode(image)?, den, &sched, sched.t_e())?;
                round_trip(&z, den, &sched, &codec)
            }
        }
    });
    results.into_iter().map(|r| r.map_err(|e| e.in_stage("baseline"))).collect()
}

/// One row of the inversion-strength sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub t_r: usize,
    pub report: ConsistencyReport,
}

/// Shared state of a sweep: the drag and the alignment are computed once.
pub struct Sweep<'a, D: Denoiser + Sync + ?Sized> {
    scene: &'a SyntheticScene,
    cfg: PipelineConfig,
    den: &'a D,
    edited: EditedReference,
}

impl<'a, D: Denoiser + Sync + ?Sized> Sweep<'a, D> {
    pub fn prepare(scene: &'a SyntheticScene, spec: &EditSpec, cfg: &PipelineConfig, den: &'a D) -> Result<Self> {
        let edited = edit_and_align(scene, spec, cfg, den, &mut ())?;
        Ok(Self {
            scene,
            cfg: cfg.clone(),
            den,
            edited,
        })
    }

    /// Propagation with `t_r = round(eta · t_total)`.
    pub fn run<E: Executor>(&self, eta: f64, exec: &E) -> Result<SweepRow> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::invalid(format!("inversion strength must lie in (0, 1), got {eta}")));
        }
        let t_r = step_for_strength(eta, self.cfg.t_total);
        let sched = self.cfg.schedule()?;
        let sched = sched.clone().with_steps(sched.t_e(), t_r)?;
        let codec = self.cfg.codec()?;
        let reference = reinvert_edited(&self.edited.drag.edited_image, self.den, &sched, &codec)?;
        let (cloud, views) = propagate(self.scene, &self.edited, &reference, &sched, &self.cfg, self.den, exec, &mut ())?;
        let (images, unedited): (Vec<Image>, Vec<Image>) = views.into_iter().map(|v| (v.edited_image, v.round_trip)).unzip();
        let report = score_views(&self.edited.cameras, &images, &unedited, self.edited.alignment.state.reference().view_id, &cloud, &self.cfg)?;
        Ok(SweepRow { eta, t_r, report })
    }
}

//! Run configuration (`config.json`).
//!
//! Every field is optional; missing fields take the defaults below, which
//! keep the 50-step schedule with drag at step 35 and propagation at step 20.

use std::path::{Path, PathBuf};

use dragscene_core::alignment::{AlignConfig, AlignMethod, PoseInit};
use dragscene_core::diffusion::ToyDenoiser;
use dragscene_core::drag::{DragConfig, EditSpec};
use dragscene_core::mvopt::MVOptConfig;
use dragscene_core::pipeline::PipelineConfig;
use dragscene_core::scene::{SceneKind, SceneOptions, SyntheticScene, DEFAULT_VIEWS};
use serde::{Deserialize, Serialize};

use crate::edit_file::load_edit;
use crate::io::read_json;
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: String,
    pub views: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub arc_degrees: f64,
    pub radius: f64,
    pub camera_height: f64,
    pub focal_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let o = SceneOptions::default();
        Self {
            kind: SceneKind::TwoBox.name().to_string(),
            views: DEFAULT_VIEWS,
            seed: 0,
            width: o.width,
            height: o.height,
            arc_degrees: o.arc_degrees,
            radius: o.radius,
            camera_height: o.camera_height,
            focal_scale: o.focal_scale,
        }
    }
}

impl SceneConfig {
    pub fn kind(&self) -> Result<SceneKind> {
        SceneKind::parse(&self.kind).ok_or_else(|| {
            Error::Usage(format!(
                "unknown scene kind {:?} (expected plane-billboards, textured-blobs or two-box)",
                self.kind
            ))
        })
    }

    pub fn options(&self) -> SceneOptions {
        SceneOptions {
            width: self.width,
            height: self.height,
            arc_degrees: self.arc_degrees,
            radius: self.radius,
            camera_height: self.camera_height,
            focal_scale: self.focal_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_total: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta_e: f64,
    pub eta_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserConfig {
    Zero,
    Linear { a: f64 },
    Smoothing,
}

impl From<DenoiserConfig> for ToyDenoiser {
    fn from(d: DenoiserConfig) -> Self {
        match d {
            DenoiserConfig::Zero => ToyDenoiser::Zero,
            DenoiserConfig::Linear { a } => ToyDenoiser::Linear { a },
            DenoiserConfig::Smoothing => ToyDenoiser::Smoothing,
        }
    }
}

impl From<ToyDenoiser> for DenoiserConfig {
    fn from(d: ToyDenoiser) -> Self {
        match d {
            ToyDenoiser::Zero => DenoiserConfig::Zero,
            ToyDenoiser::Linear { a } => DenoiserConfig::Linear { a },
            ToyDenoiser::Smoothing => DenoiserConfig::Smoothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DragJson {
    pub m: usize,
    pub lr: f64,
    pub beta: f64,
    pub r_track: usize,
    pub r_patch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMethodJson {
    Irls,
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignJson {
    pub iters: usize,
    pub lr: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub method: AlignMethodJson,
    pub freeze_poses: bool,
    /// Original views aligned with the edited reference.
    pub aux_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MVOptJson {
    pub lambda: f64,
    pub sigma: f64,
    pub m_iters: usize,
    pub mask_threshold: f64,
    pub literal_rec: bool,
}

/// Where the drag instruction comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EditSource {
    /// The scene's embedded edit, seen from `ref_view` (default: centre view).
    GroundTruth {
        #[serde(default)]
        ref_view: Option<usize>,
        #[serde(default = "default_margin")]
        margin: usize,
    },
    /// Same mask and handles as the ground truth, with targets on the
    /// handles.
    Noop {
        #[serde(default)]
        ref_view: Option<usize>,
        #[serde(default = "default_margin")]
        margin: usize,
    },
    /// An `edit.json`, relative to the config file.
    File { path: PathBuf },
}

fn default_margin() -> usize {
    2
}

impl Default for EditSource {
    fn default() -> Self {
        EditSource::GroundTruth {
            ref_view: None,
            margin: default_margin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub codec: CodecConfig,
    pub drag: DragJson,
    pub align: AlignJson,
    pub mvopt: MVOptJson,
    pub edit: EditSource,
    /// Also run the independent per-view drag and score it.
    pub baseline: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pipeline(&PipelineConfig::harness())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        RunConfig::default().schedule
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        RunConfig::default().denoiser
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        RunConfig::default().codec
    }
}

impl Default for DragJson {
    fn default() -> Self {
        RunConfig::default().drag
    }
}

impl Default for AlignJson {
    fn default() -> Self {
        RunConfig::default().align
    }
}

impl Default for MVOptJson {
    fn default() -> Self {
        RunConfig::default().mvopt
    }
}

impl RunConfig {
    pub fn from_pipeline(p: &PipelineConfig) -> Self {
        Self {
            seed: p.seed,
            scene: SceneConfig::default(),
            schedule: ScheduleConfig {
                t_total: p.t_total,
                beta_min: p.beta_min,
                beta_max: p.beta_max,
                eta_e: p.eta_e,
                eta_r: p.eta_r,
            },
            denoiser: p.denoiser.into(),
            codec: CodecConfig {
                channels: p.latent_channels,
                stride: p.latent_stride,
            },
            drag: DragJson {
                m: p.drag.m,
                lr: p.drag.lr,
                beta: p.drag.beta,
                r_track: p.drag.r_track,
                r_patch: p.drag.r_patch,
            },
            align: AlignJson {
                iters: p.align.iters,
                lr: p.align.lr,
                noise_sigma: p.align.noise_sigma,
                seed: p.align.seed,
                method: match p.align.method {
                    AlignMethod::Irls => AlignMethodJson::Irls,
                    AlignMethod::GradientDescent => AlignMethodJson::GradientDescent,
                },
                freeze_poses: p.align.freeze_poses,
                aux_views: p.aux_views,
            },
            mvopt: MVOptJson {
                lambda: p.mvopt.lambda,
                sigma: p.mvopt.sigma,
                m_iters: p.mvopt.m_iters,
                mask_threshold: p.mvopt.mask_threshold,
                literal_rec: p.mvopt.literal_rec,
            },
            edit: EditSource::default(),
            baseline: true,
            output_dir: None,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            t_total: self.schedule.t_total,
            beta_min: self.schedule.beta_min,
            beta_max: self.schedule.beta_max,
            eta_e: self.schedule.eta_e,
            eta_r: self.schedule.eta_r,
            denoiser: self.denoiser.into(),
            latent_channels: self.codec.channels,
            latent_stride: self.codec.stride,
            drag: DragConfig {
                m: self.drag.m,
                lr: self.drag.lr,
                beta: self.drag.beta,
                r_track: self.drag.r_track,
                r_patch: self.drag.r_patch,
            },
            align: AlignConfig {
                iters: self.align.iters,
                lr: self.align.lr,
                noise_sigma: self.align.noise_sigma,
                seed: self.align.seed,
                method: match self.align.method {
                    AlignMethodJson::Irls => AlignMethod::Irls,
                    AlignMethodJson::GradientDescent => AlignMethod::GradientDescent,
                },
                init: PoseInit::Procrustes,
                freeze_poses: self.align.freeze_poses,
            },
            aux_views: self.align.aux_views,
            mvopt: MVOptConfig {
                lambda: self.mvopt.lambda,
                sigma: self.mvopt.sigma,
                m_iters: self.mvopt.m_iters,
                mask_threshold: self.mvopt.mask_threshold,
                literal_rec: self.mvopt.literal_rec,
            },
        }
    }

    /// Reads a config; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let EditSource::File { path: p } = &mut cfg.edit {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Usage(msg) | Error::Format { detail: msg, .. } => Error::format(path, msg),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Numeric ranges and referenced files.
    pub fn validate(&self) -> Result<()> {
        self.scene.kind()?;
        if self.scene.views < 2 {
            return Err(Error::Usage(format!("scene.views must be >= 2, got {}", self.scene.views)));
        }
        if self.scene.width == 0 || self.scene.height == 0 {
            return Err(Error::Usage("scene resolution must be positive".into()));
        }
        let s = self.codec.stride;
        if s == 0 || !self.scene.width.is_multiple_of(s) || !self.scene.height.is_multiple_of(s) {
            return Err(Error::Usage(format!(
                "codec.stride {s} must divide the scene resolution {}x{}",
                self.scene.width, self.scene.height
            )));
        }
        self.pipeline().validate().map_err(|e| Error::Usage(e.to_string()))?;
        if let EditSource::File { path } = &self.edit {
            if !path.is_file() {
                return Err(Error::Usage(format!("edit file {} does not exist", path.display())));
            }
        }
        if let EditSource::GroundTruth { ref_view: Some(r), .. } | EditSource::Noop { ref_view: Some(r), .. } = self.edit {
            if r >= self.scene.views {
                return Err(Error::Usage(format!("edit.ref_view {r} outside a {}-view scene", self.scene.views)));
            }
        }
        Ok(())
    }

    pub fn resolve_edit(&self, scene: &SyntheticScene) -> Result<EditSpec> {
        Ok(match &self.edit {
            EditSource::GroundTruth { ref_view, margin } => {
                scene.ground_truth_edit_spec(ref_view.unwrap_or_else(|| scene.default_reference()), *margin)?
            }
            EditSource::Noop { ref_view, margin } => {
                scene.noop_edit_spec(ref_view.unwrap_or_else(|| scene.default_reference()), *margin)?
            }
            EditSource::File { path } => load_edit(path)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let p = cfg.pipeline();
        let sched = p.schedule().unwrap();
        assert_eq!((sched.t_total(), sched.t_e(), sched.t_r()), (50, 35, 20));
        assert_eq!(cfg.scene.views, 20);
        assert_eq!(p, PipelineConfig::harness());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"mvopt": {"lambda": 2.0}, "denoiser": {"kind": "smoothing"}, "edit": {"kind": "noop"}}"#).unwrap();
        assert_eq!(cfg.mvopt.lambda, 2.0);
        assert_eq!(cfg.mvopt.m_iters, 60);
        assert_eq!(cfg.denoiser, DenoiserConfig::Smoothing);
        assert_eq!(cfg.edit, EditSource::Noop { ref_view: None, margin: 2 });
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"mvopt": {"lamda": 2.0}}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.codec.stride = 5;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        let mut cfg = RunConfig::default();
        cfg.schedule.eta_r = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            edit: EditSource::File {
                path: "/nonexistent/edit.json".into(),
            },
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serialized_config_reads_back() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}

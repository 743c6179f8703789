//! The operations behind each subcommand, usable without the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dragscene_core::drag::{drag_edit, EditSpec};
use dragscene_core::metrics::{consistency_metrics, ConsistencyReport, MetricView};
use dragscene_core::pipeline::{
    align_reference, baseline_independent_drag, finish_pipeline, relative_cameras, run_pipeline, EditedReference, Executor,
    Sweep,
};
use dragscene_core::scene::{generate_synthetic_scene, SceneKind, SceneOptions, SyntheticScene};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_alignment, read_baseline, read_cloud, read_drag, read_view_images, write_baseline, write_drag,
    ArtifactWriter, REPORT_FILE, SWEEP_FILE,
};
use crate::config::{RunConfig, SceneConfig, CONFIG_FILE};
use crate::edit_file::{load_edit, save_edit, EDIT_FILE};
use crate::io::{read_json, write_bytes, write_json};
use crate::manifest::{load_scene, save_scene};
use crate::{Error, Result};

pub fn synth(kind: SceneKind, views: usize, seed: u64, opts: &SceneOptions, out: &Path) -> Result<SyntheticScene> {
    let scene = generate_synthetic_scene(kind, views, seed, opts)?;
    save_scene(out, &scene, opts)?;
    Ok(scene)
}

fn scene_config(scene: &SyntheticScene, opts: &SceneOptions) -> SceneConfig {
    SceneConfig {
        kind: scene.kind.name().to_string(),
        views: scene.views.len(),
        seed: scene.seed,
        width: opts.width,
        height: opts.height,
        arc_degrees: opts.arc_degrees,
        radius: opts.radius,
        camera_height: opts.camera_height,
        focal_scale: opts.focal_scale,
    }
}

/// Config for a stage working on `dir`: an explicit file, else the one the
/// directory already holds, else defaults.
pub fn stage_config(dir: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    match explicit {
        Some(p) => RunConfig::load(p),
        None if dir.join(CONFIG_FILE).is_file() => RunConfig::load(&dir.join(CONFIG_FILE)),
        None => Ok(RunConfig::default()),
    }
}

/// Drags the reference view of the scene in `dir`; writes `config.json`,
/// `edit.json` and `ref/`.
pub fn edit_ref(dir: &Path, config: Option<&Path>, edit: Option<&Path>) -> Result<()> {
    let (scene, opts) = load_scene(dir)?;
    let mut cfg = stage_config(dir, config)?;
    cfg.scene = scene_config(&scene, &opts);
    cfg.validate()?;
    let spec = match edit {
        Some(p) => load_edit(p)?,
        None => cfg.resolve_edit(&scene)?,
    };
    check_spec(&scene, &spec)?;
    let p = cfg.pipeline();
    let drag = drag_edit(&scene.images[spec.ref_view], &spec, &p.denoiser, &p.schedule()?, &p.codec()?, &p.drag)
        .map_err(|e| e.in_stage("drag"))?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    save_edit(dir, &spec)?;
    write_drag(dir, &drag)
}

fn check_spec(scene: &SyntheticScene, spec: &EditSpec) -> Result<()> {
    let Some(cam) = scene.views.get(spec.ref_view) else {
        return Err(Error::Usage(format!("edit reference view {} not in a {}-view scene", spec.ref_view, scene.views.len())));
    };
    if spec.mask.width() != cam.width || spec.mask.height() != cam.height {
        return Err(Error::Usage(format!(
            "edit mask is {}x{}, scene views are {}x{}",
            spec.mask.width(),
            spec.mask.height(),
            cam.width,
            cam.height
        )));
    }
    Ok(())
}

struct Staged {
    scene: SyntheticScene,
    cfg: RunConfig,
    spec: EditSpec,
}

fn load_staged(dir: &Path) -> Result<Staged> {
    let (scene, _) = load_scene(dir)?;
    let cfg = stage_config(dir, None)?;
    let spec = load_edit(&dir.join(EDIT_FILE))?;
    check_spec(&scene, &spec)?;
    Ok(Staged { scene, cfg, spec })
}

/// Aligns the dragged reference in `dir` with the auxiliary views.
pub fn align(dir: &Path) -> Result<()> {
    let st = load_staged(dir)?;
    let drag = read_drag(dir)?;
    let mut writer = ArtifactWriter::new(dir);
    let res = align_reference(&st.scene, &st.spec, drag, &st.cfg.pipeline(), &mut writer);
    writer.finish()?;
    res.map(|_| ())?;
    Ok(())
}

/// Builds the cloud from the stored alignment and edits every view.
pub fn propagate<E: Executor>(dir: &Path, exec: &E) -> Result<()> {
    let st = load_staged(dir)?;
    let drag = read_drag(dir)?;
    let alignment = read_alignment(dir)?;
    if alignment.state.reference().view_id != st.spec.ref_view {
        return Err(Error::format(&dir.join("aligned"), "alignment is anchored to a different reference view"));
    }
    let edited = EditedReference {
        effective_mask: alignment.masks[0].clone(),
        cameras: relative_cameras(&st.scene, st.spec.ref_view),
        drag,
        alignment,
    };
    let p = st.cfg.pipeline();
    let mut writer = ArtifactWriter::new(dir);
    let res = finish_pipeline(&st.scene, &st.spec, edited, &p, &p.denoiser, exec, &mut writer);
    writer.finish()?;
    res?;
    Ok(())
}

/// Whole pipeline into `out`, then `report.json`.
pub fn run<E: Executor>(cfg: &RunConfig, out: &Path, exec: &E) -> Result<ReportFile> {
    cfg.validate()?;
    let opts = cfg.scene.options();
    let scene = synth(cfg.scene.kind()?, cfg.scene.views, cfg.scene.seed, &opts, out)?;
    let spec = cfg.resolve_edit(&scene)?;
    check_spec(&scene, &spec)?;
    let mut stored = cfg.clone();
    stored.output_dir = None;
    if let crate::config::EditSource::File { .. } = stored.edit {
        // the spec now lives in the tree itself
        stored.edit = crate::config::EditSource::File { path: EDIT_FILE.into() };
    }
    write_json(&out.join(CONFIG_FILE), &stored)?;
    save_edit(out, &spec)?;
    let p = cfg.pipeline();
    let mut writer = ArtifactWriter::new(out);
    let res = run_pipeline(&scene, &spec, &p, &p.denoiser, exec, &mut writer);
    writer.finish()?;
    let edited = res?;
    // scored in memory: the float32 files would shift a few z-buffer ties
    let baseline = if cfg.baseline {
        let images = baseline_independent_drag(&scene, &spec, &p, &p.denoiser, exec)?;
        write_baseline(out, &images)?;
        Some((&edited.score(&images, &p)?).into())
    } else {
        None
    };
    let report = ReportFile {
        scene_id: scene.scene_id.clone(),
        ref_view: spec.ref_view,
        dragscene: (&edited.report(&p)?).into(),
        baseline,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub view_id: usize,
    pub agreement_l1: f64,
    pub agreement_pixels: usize,
    pub preservation_psnr: f64,
    pub preserved_pixels: usize,
    pub visible_masked_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub masked_latent_variance: f64,
    pub variance_points: usize,
    pub masked_agreement_l1: f64,
    pub min_preservation_psnr: f64,
    pub mean_preservation_psnr: f64,
    pub per_view: Vec<ViewRow>,
}

impl From<&ConsistencyReport> for ReportJson {
    fn from(r: &ConsistencyReport) -> Self {
        Self {
            masked_latent_variance: r.masked_latent_variance,
            variance_points: r.variance_points,
            masked_agreement_l1: r.masked_agreement_l1,
            min_preservation_psnr: r.min_preservation_psnr,
            mean_preservation_psnr: r.mean_preservation_psnr,
            per_view: r
                .per_view
                .iter()
                .map(|v| ViewRow {
                    view_id: v.view_id,
                    agreement_l1: v.agreement_l1,
                    agreement_pixels: v.agreement_pixels,
                    preservation_psnr: v.preservation_psnr,
                    preserved_pixels: v.preserved_pixels,
                    visible_masked_points: v.visible_masked_points,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub scene_id: String,
    pub ref_view: usize,
    pub dragscene: ReportJson,
    /// Independent per-view drag, scored through the same cloud.
    pub baseline: Option<ReportJson>,
}

/// Scores the stored views (and baseline, if present); writes
/// `report.json`.
pub fn metrics(dir: &Path) -> Result<ReportFile> {
    let st = load_staged(dir)?;
    let cloud = read_cloud(dir)?;
    let n = st.scene.views.len();
    let cameras = relative_cameras(&st.scene, st.spec.ref_view);
    let mut edited = Vec::with_capacity(n);
    let mut unedited = Vec::with_capacity(n);
    for v in 0..n {
        let (e, u) = read_view_images(dir, v)?;
        edited.push(e);
        unedited.push(u);
    }
    let p = st.cfg.pipeline();
    let codec = p.codec()?;
    let score = |images: &[dragscene_core::grid::Image]| -> Result<ConsistencyReport> {
        let views: Vec<MetricView<'_>> = cameras
            .iter()
            .zip(images.iter().zip(&unedited))
            .map(|(cam, (edited, unedited))| MetricView { cam, edited, unedited })
            .collect();
        Ok(consistency_metrics(&views, st.spec.ref_view, &cloud, &codec, p.mvopt.mask_threshold)?)
    };
    let report = ReportFile {
        scene_id: st.scene.scene_id.clone(),
        ref_view: st.spec.ref_view,
        dragscene: (&score(&edited)?).into(),
        baseline: match read_baseline(dir, n)? {
            Some(b) => Some((&score(&b)?).into()),
            None => None,
        },
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn read_report(dir: &Path) -> Result<ReportFile> {
    read_json(&dir.join(REPORT_FILE))
}

/// One row of the sweep; failures are kept as messages.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub eta: f64,
    pub t_r: Option<usize>,
    pub seconds: f64,
    pub result: std::result::Result<ConsistencyReport, String>,
}

pub const SWEEP_HEADER: &str =
    "eta,t_r,masked_latent_variance,variance_points,masked_agreement_l1,min_preservation_psnr,mean_preservation_psnr,error";

pub fn sweep_csv(rows: &[SweepOutcome]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let t_r = r.t_r.map(|t| t.to_string()).unwrap_or_default();
        match &r.result {
            Ok(rep) => {
                let _ = writeln!(
                    s,
                    "{},{t_r},{},{},{},{},{},",
                    r.eta,
                    rep.masked_latent_variance,
                    rep.variance_points,
                    rep.masked_agreement_l1,
                    rep.min_preservation_psnr,
                    rep.mean_preservation_psnr
                );
            }
            Err(msg) => {
                let _ = writeln!(s, "{},{t_r},,,,,,\"{}\"", r.eta, msg.replace('"', "'"));
            }
        }
    }
    s
}

/// Propagation at each inversion strength, sharing one drag and one
/// alignment; writes `sweep.csv` under `out`. Wall-clock seconds are
/// returned but kept out of the CSV so the file is reproducible.
pub fn sweep<E: Executor>(cfg: &RunConfig, etas: &[f64], out: &Path, exec: &E) -> Result<Vec<SweepOutcome>> {
    cfg.validate()?;
    if let Some(bad) = etas.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(Error::Usage(format!("inversion strengths must lie in (0, 1), got {bad}")));
    }
    let mut rows = Vec::with_capacity(etas.len());
    if !etas.is_empty() {
        let opts = cfg.scene.options();
        let scene = generate_synthetic_scene(cfg.scene.kind()?, cfg.scene.views, cfg.scene.seed, &opts)?;
        let spec = cfg.resolve_edit(&scene)?;
        check_spec(&scene, &spec)?;
        let p = cfg.pipeline();
        let prepared = Sweep::prepare(&scene, &spec, &p, &p.denoiser)?;
        for &eta in etas {
            let start = Instant::now();
            let res = prepared.run(eta, exec);
            let seconds = start.elapsed().as_secs_f64();
            rows.push(match res {
                Ok(row) => SweepOutcome {
                    eta,
                    t_r: Some(row.t_r),
                    seconds,
                    result: Ok(row.report),
                },
                Err(e) => SweepOutcome {
                    eta,
                    t_r: None,
                    seconds,
                    result: Err(e.to_string()),
                },
            });
        }
    }
    write_bytes(&out.join(SWEEP_FILE), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Human-readable summary of a tensor, JSON file or output directory.
pub fn inspect(path: &Path) -> Result<String> {
    let mut s = String::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = Vec::new();
        collect_files(path, &mut entries)?;
        entries.sort();
        for e in entries {
            let rel = e.strip_prefix(path).unwrap_or(&e);
            let _ = writeln!(s, "{}: {}", rel.display(), describe_file(&e)?);
        }
        return Ok(s);
    }
    let _ = writeln!(s, "{}", describe_file(path)?);
    Ok(s)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn describe_file(path: &Path) -> Result<String> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dstn") => {
            let t = crate::tensor::read_tensor(path)?;
            let d = t.data();
            let (lo, hi) = d.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            Ok(format!("DSTN v1 float32 dims {:?}, {} values, range [{lo}, {hi}]", t.dims(), d.len()))
        }
        Some("json") => {
            let v: serde_json::Value = read_json(path)?;
            Ok(match &v {
                serde_json::Value::Object(m) => {
                    let mut keys: Vec<String> = m
                        .iter()
                        .map(|(k, v)| match v {
                            serde_json::Value::Array(a) => format!("{k}[{}]", a.len()),
                            serde_json::Value::String(s) => format!("{k}={s}"),
                            serde_json::Value::Number(n) => format!("{k}={n}"),
                            _ => k.clone(),
                        })
                        .collect();
                    keys.sort();
                    format!("JSON {{{}}}", keys.join(", "))
                }
                other => format!("JSON {}", other),
            })
        }
        _ => {
            let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
            Ok(format!("{len} bytes"))
        }
    }
}

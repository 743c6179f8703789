//! The output tree of a run.
//!
//! ```text
//! scene.json, images/        scene manifest and view images
//! config.json                resolved run configuration
//! edit.json, edit_mask.dstn  drag instruction
//! ref/                       drag result of the reference view
//! aligned/                   poses.json plus fused pointmaps, validity and masks
//! cloud/                     attributed point cloud
//! views/<id>/                latents, images, rendered mask, loss.csv
//! reconstruction/            fused colour cloud
//! baseline/                  independent per-view drag (optional)
//! report.json                consistency metrics
//! sweep.csv                  inversion-strength sweep
//! ```
//!
//! Tensors are stored as float32, so stages re-read from disk see values
//! rounded to single precision.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dragscene_core::alignment::{AlignOutcome, AlignmentState};
use dragscene_core::drag::DragResult;
use dragscene_core::geometry::Pointmap;
use dragscene_core::grid::{Grid, Image, LatentGrid};
use dragscene_core::latent_field::AttributedPointCloud;
use dragscene_core::mvopt::LossRecord;
use dragscene_core::pipeline::{Artifact, ColoredCloud, PipelineObserver, ViewOutput};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_bytes, write_json};
use crate::manifest::CameraJson;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn tensor_at(path: &Path) -> Result<Tensor> {
    read_tensor(path)
}

fn grid_at(path: &Path) -> Result<Grid> {
    tensor_at(path)?.to_grid().map_err(|e| Error::tensor(path, e))
}

fn latent_at(path: &Path, timestep: usize, stride: usize) -> Result<LatentGrid> {
    Ok(LatentGrid::new(grid_at(path)?, timestep, stride))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DragJson {
    t_e: usize,
    t_r: usize,
    latent_stride: usize,
    iterations: usize,
    changed: bool,
    tracked_handles: Vec<[f64; 2]>,
    clamped_handles: Vec<usize>,
    motion_loss_trace: Vec<f64>,
}

pub fn write_drag(root: &Path, d: &DragResult) -> Result<()> {
    let dir = root.join("ref");
    write_tensor(&dir.join("initial_latent.dstn"), &Tensor::from_grid(&d.initial_latent_te.values))?;
    write_tensor(&dir.join("edited_latent.dstn"), &Tensor::from_grid(&d.edited_latent_te.values))?;
    write_tensor(&dir.join("edited_image.dstn"), &Tensor::from_grid(&d.edited_image))?;
    write_tensor(&dir.join("reference_latent.dstn"), &Tensor::from_grid(&d.reference_latent_tr.values))?;
    let meta = DragJson {
        t_e: d.edited_latent_te.timestep,
        t_r: d.reference_latent_tr.timestep,
        latent_stride: d.edited_latent_te.latent_stride,
        iterations: d.iterations,
        changed: d.changed(),
        tracked_handles: d.tracked_handles.iter().map(|&(u, v)| [u, v]).collect(),
        clamped_handles: d.clamped_handles.clone(),
        motion_loss_trace: d.motion_loss_trace.clone(),
    };
    write_json(&dir.join("drag.json"), &meta)
}

pub fn read_drag(root: &Path) -> Result<DragResult> {
    let dir = root.join("ref");
    let meta: DragJson = read_json(&dir.join("drag.json"))?;
    let s = meta.latent_stride;
    let d = DragResult {
        initial_latent_te: latent_at(&dir.join("initial_latent.dstn"), meta.t_e, s)?,
        edited_latent_te: latent_at(&dir.join("edited_latent.dstn"), meta.t_e, s)?,
        edited_image: grid_at(&dir.join("edited_image.dstn"))?,
        reference_latent_tr: latent_at(&dir.join("reference_latent.dstn"), meta.t_r, s)?,
        tracked_handles: meta.tracked_handles.iter().map(|p| (p[0], p[1])).collect(),
        clamped_handles: meta.clamped_handles,
        iterations: meta.iterations,
        motion_loss_trace: meta.motion_loss_trace,
    };
    if d.changed() != meta.changed {
        return Err(Error::format(
            &dir.join("drag.json"),
            "stored latents do not reflect the recorded `changed` flag (edit below float32 precision)",
        ));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignedView {
    camera: CameraJson,
    scale: f64,
    points: String,
    valid: String,
    mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosesJson {
    /// View id of the world frame.
    reference: usize,
    views: Vec<AlignedView>,
    loss_trace: Vec<f64>,
}

pub fn write_alignment(root: &Path, a: &AlignOutcome) -> Result<()> {
    let dir = root.join("aligned");
    let s = &a.state;
    let mut views = Vec::with_capacity(s.len());
    for k in 0..s.len() {
        let cam = &s.cameras[k];
        let pm = &s.fused[k];
        let id = cam.view_id;
        let entry = AlignedView {
            camera: cam.into(),
            scale: s.scales[k],
            points: format!("points_{id:03}.dstn"),
            valid: format!("valid_{id:03}.dstn"),
            mask: format!("mask_{id:03}.dstn"),
        };
        let pts: Vec<[f64; 3]> = pm
            .points
            .iter()
            .zip(&pm.valid)
            .map(|(p, &ok)| if ok { [p.x, p.y, p.z] } else { [0.0; 3] })
            .collect();
        let pts = Tensor::new(vec![pm.height, pm.width, 3], Tensor::from_rows(&pts).data().to_vec()).expect("h*w*3 values");
        write_tensor(&dir.join(&entry.points), &pts)?;
        let valid: Vec<f32> = pm.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        write_tensor(&dir.join(&entry.valid), &Tensor::new(vec![pm.height, pm.width], valid).expect("h*w values"))?;
        write_tensor(&dir.join(&entry.mask), &Tensor::from_mask(&a.masks[k]))?;
        views.push(entry);
    }
    let poses = PosesJson {
        reference: s.reference().view_id,
        views,
        loss_trace: a.loss_trace.clone(),
    };
    write_json(&dir.join("poses.json"), &poses)
}

pub fn read_alignment(root: &Path) -> Result<AlignOutcome> {
    let dir = root.join("aligned");
    let file = dir.join("poses.json");
    let poses: PosesJson = read_json(&file)?;
    let mut state = AlignmentState {
        cameras: Vec::new(),
        fused: Vec::new(),
        scales: Vec::new(),
    };
    let mut masks = Vec::new();
    for v in &poses.views {
        let cam = v.camera.to_camera()?;
        let ppath = dir.join(&v.points);
        let pts = tensor_at(&ppath)?;
        if pts.dims() != [cam.height, cam.width, 3] {
            return Err(Error::format(&ppath, format!("expected {}x{}x3 points, found {:?}", cam.height, cam.width, pts.dims())));
        }
        let vpath = dir.join(&v.valid);
        let valid = tensor_at(&vpath)?;
        if valid.dims() != [cam.height, cam.width] {
            return Err(Error::format(&vpath, format!("expected {}x{} flags, found {:?}", cam.height, cam.width, valid.dims())));
        }
        let points = pts
            .data()
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        let flags = valid.data().iter().map(|&x| x != 0.0).collect();
        state
            .fused
            .push(Pointmap::new(poses.reference, cam.width, cam.height, points, flags)?);
        let mpath = dir.join(&v.mask);
        masks.push(tensor_at(&mpath)?.to_mask().map_err(|e| Error::tensor(&mpath, e))?);
        state.cameras.push(cam);
        state.scales.push(v.scale);
    }
    state.validate().map_err(|e| Error::format(&file, e.to_string()))?;
    Ok(AlignOutcome {
        state,
        masks,
        loss_trace: poses.loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudJson {
    points: usize,
    channels: usize,
    timestep: usize,
    latent_stride: usize,
    source_width: usize,
}

pub fn write_cloud(root: &Path, c: &AttributedPointCloud) -> Result<()> {
    let dir = root.join("cloud");
    let pos: Vec<[f64; 3]> = c.positions.iter().map(|p| [p.x, p.y, p.z]).collect();
    write_tensor(&dir.join("positions.dstn"), &Tensor::from_rows(&pos))?;
    let lat: Vec<f32> = c.latents.iter().map(|&x| x as f32).collect();
    write_tensor(&dir.join("latents.dstn"), &Tensor::new(vec![c.len(), c.channels], lat).expect("n*c values"))?;
    write_tensor(&dir.join("mask.dstn"), &Tensor::from_vector(&c.mask_weights))?;
    let src: Vec<[f64; 2]> = c.source_pixel.iter().map(|&(u, v)| [u as f64, v as f64]).collect();
    write_tensor(&dir.join("source_pixels.dstn"), &Tensor::from_rows(&src))?;
    write_json(
        &dir.join("cloud.json"),
        &CloudJson {
            points: c.len(),
            channels: c.channels,
            timestep: c.timestep,
            latent_stride: c.latent_stride,
            source_width: c.source_width,
        },
    )
}

pub fn read_cloud(root: &Path) -> Result<AttributedPointCloud> {
    let dir = root.join("cloud");
    let meta: CloudJson = read_json(&dir.join("cloud.json"))?;
    let rows = |name: &str| -> Result<Tensor> { tensor_at(&dir.join(name)) };
    let p = dir.join("positions.dstn");
    let positions: Vec<Vector3<f64>> = rows("positions.dstn")?
        .to_rows::<3>()
        .map_err(|e| Error::tensor(&p, e))?
        .into_iter()
        .map(|r| Vector3::new(r[0], r[1], r[2]))
        .collect();
    let latents = rows("latents.dstn")?.data_f64();
    let m = dir.join("mask.dstn");
    let mask = rows("mask.dstn")?.to_vector().map_err(|e| Error::tensor(&m, e))?;
    let s = dir.join("source_pixels.dstn");
    let source = rows("source_pixels.dstn")?
        .to_rows::<2>()
        .map_err(|e| Error::tensor(&s, e))?
        .into_iter()
        .map(|r| (r[0] as usize, r[1] as usize))
        .collect();
    if positions.len() != meta.points {
        return Err(Error::format(&p, format!("{} points, cloud.json declares {}", positions.len(), meta.points)));
    }
    Ok(AttributedPointCloud::new(
        positions,
        latents,
        meta.channels,
        mask,
        source,
        meta.source_width,
        meta.timestep,
        meta.latent_stride,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewJson {
    view_id: usize,
    timestep: usize,
    latent_stride: usize,
    uncovered: bool,
}

pub fn view_dir(root: &Path, view_id: usize) -> PathBuf {
    root.join("views").join(format!("{view_id:03}"))
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("iteration,rec,mask,total\n");
    for (k, r) in trace.iter().enumerate() {
        let _ = writeln!(s, "{k},{},{},{}", r.rec, r.mask, r.total);
    }
    s
}

pub fn write_view(root: &Path, v: &ViewOutput) -> Result<()> {
    let dir = view_dir(root, v.view_id);
    write_tensor(&dir.join("edited_image.dstn"), &Tensor::from_grid(&v.edited_image))?;
    write_tensor(&dir.join("round_trip.dstn"), &Tensor::from_grid(&v.round_trip))?;
    write_tensor(&dir.join("initial_latent.dstn"), &Tensor::from_grid(&v.initial_latent.values))?;
    write_tensor(&dir.join("optimized_latent.dstn"), &Tensor::from_grid(&v.optimized_latent.values))?;
    write_tensor(&dir.join("mask_map.dstn"), &Tensor::from_mask(&v.mask_map))?;
    write_bytes(&dir.join("loss.csv"), loss_csv(&v.loss_trace).as_bytes())?;
    write_json(
        &dir.join("view.json"),
        &ViewJson {
            view_id: v.view_id,
            timestep: v.initial_latent.timestep,
            latent_stride: v.initial_latent.latent_stride,
            uncovered: v.uncovered,
        },
    )
}

/// Edited and unedited images of one stored view.
pub fn read_view_images(root: &Path, view_id: usize) -> Result<(Image, Image)> {
    let dir = view_dir(root, view_id);
    Ok((grid_at(&dir.join("edited_image.dstn"))?, grid_at(&dir.join("round_trip.dstn"))?))
}

pub fn write_reconstruction(root: &Path, c: &ColoredCloud) -> Result<()> {
    let dir = root.join("reconstruction");
    let pos: Vec<[f64; 3]> = c.positions.iter().map(|p| [p.x, p.y, p.z]).collect();
    write_tensor(&dir.join("positions.dstn"), &Tensor::from_rows(&pos))?;
    write_tensor(&dir.join("colors.dstn"), &Tensor::from_rows(&c.colors))?;
    write_tensor(&dir.join("variance.dstn"), &Tensor::from_vector(&c.variance))?;
    let obs: Vec<f64> = c.observations.iter().map(|&k| k as f64).collect();
    write_tensor(&dir.join("observations.dstn"), &Tensor::from_vector(&obs))
}

pub fn baseline_path(root: &Path, view_id: usize) -> PathBuf {
    root.join("baseline").join(format!("view_{view_id:03}.dstn"))
}

pub fn write_baseline(root: &Path, images: &[Image]) -> Result<()> {
    for (k, img) in images.iter().enumerate() {
        write_tensor(&baseline_path(root, k), &Tensor::from_grid(img))?;
    }
    Ok(())
}

/// Baseline images, if a baseline was stored.
pub fn read_baseline(root: &Path, n_views: usize) -> Result<Option<Vec<Image>>> {
    if !root.join("baseline").is_dir() {
        return Ok(None);
    }
    (0..n_views).map(|k| grid_at(&baseline_path(root, k))).collect::<Result<Vec<_>>>().map(Some)
}

/// Writes each artifact as soon as the pipeline produces it, so a failing
/// stage leaves everything before it on disk.
pub struct ArtifactWriter<'a> {
    root: &'a Path,
    error: Option<Error>,
}

impl<'a> ArtifactWriter<'a> {
    pub fn new(root: &'a Path) -> Self {
        Self { root, error: None }
    }

    /// First write error, if any.
    pub fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

impl PipelineObserver for ArtifactWriter<'_> {
    fn artifact(&mut self, artifact: Artifact<'_>) {
        if self.error.is_some() {
            return;
        }
        let res = match artifact {
            Artifact::EditedReference(d) => write_drag(self.root, d),
            Artifact::Aligned(a) => write_alignment(self.root, a),
            Artifact::Cloud(c) => write_cloud(self.root, c),
            Artifact::View(v) => write_view(self.root, v),
            Artifact::Reconstruction(r) => write_reconstruction(self.root, r),
        };
        self.error = res.err();
    }
}

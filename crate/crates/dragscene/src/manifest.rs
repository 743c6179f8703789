//! `scene.json`: the synthetic scene's recipe, cameras, ground truth and
//! per-view image tensors.
//!
//! Loading regenerates the scene from its recipe and checks that every
//! recorded camera, surface and image tensor matches, so a manifest on disk
//! always describes exactly the scene the algorithms see.

use std::path::{Path, PathBuf};

use dragscene_core::geometry::{CameraView, Intrinsics, Pose};
use dragscene_core::scene::{generate_synthetic_scene, Primitive, SceneKind, SceneOptions, SyntheticScene};
use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub view_id: usize,
    pub width: usize,
    pub height: usize,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    /// World-to-camera transform, row-major.
    pub pose: [[f64; 4]; 4],
}

impl From<&CameraView> for CameraJson {
    fn from(c: &CameraView) -> Self {
        let m = c.pose.to_matrix();
        let i = c.intrinsics;
        Self {
            view_id: c.view_id,
            width: c.width,
            height: c.height,
            intrinsics: [i.fx, i.fy, i.cx, i.cy],
            pose: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> dragscene_core::Result<CameraView> {
        let m = Matrix4::from_fn(|r, k| self.pose[r][k]);
        let [fx, fy, cx, cy] = self.intrinsics;
        CameraView::new(self.view_id, Pose::from_matrix(&m)?, Intrinsics::new(fx, fy, cx, cy), self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsJson {
    pub width: usize,
    pub height: usize,
    pub arc_degrees: f64,
    pub radius: f64,
    pub camera_height: f64,
    pub focal_scale: f64,
}

impl From<&SceneOptions> for OptionsJson {
    fn from(o: &SceneOptions) -> Self {
        Self {
            width: o.width,
            height: o.height,
            arc_degrees: o.arc_degrees,
            radius: o.radius,
            camera_height: o.camera_height,
            focal_scale: o.focal_scale,
        }
    }
}

impl From<&OptionsJson> for SceneOptions {
    fn from(o: &OptionsJson) -> Self {
        Self {
            width: o.width,
            height: o.height,
            arc_degrees: o.arc_degrees,
            radius: o.radius,
            camera_height: o.camera_height,
            focal_scale: o.focal_scale,
        }
    }
}

fn v3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PrimitiveJson {
    Rect {
        center: [f64; 3],
        axis_u: [f64; 3],
        axis_v: [f64; 3],
        half_u: f64,
        half_v: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Cuboid {
        center: [f64; 3],
        half: [f64; 3],
    },
}

impl From<&Primitive> for PrimitiveJson {
    fn from(p: &Primitive) -> Self {
        match p {
            Primitive::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => PrimitiveJson::Rect {
                center: v3(center),
                axis_u: v3(axis_u),
                axis_v: v3(axis_v),
                half_u: *half_u,
                half_v: *half_v,
            },
            Primitive::Sphere { center, radius } => PrimitiveJson::Sphere {
                center: v3(center),
                radius: *radius,
            },
            Primitive::Cuboid { center, half } => PrimitiveJson::Cuboid {
                center: v3(center),
                half: v3(half),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceJson {
    pub primitive: PrimitiveJson,
    pub base_color: [f64; 3],
    pub texture_amplitude: f64,
    pub texture_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthJson {
    pub surfaces: Vec<SurfaceJson>,
    pub background: [f64; 3],
    /// Index of the surface the embedded edit moves.
    pub edit_surface: usize,
    pub edit_displacement: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryJson {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub arc_degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub camera: CameraJson,
    /// Image tensor path relative to the manifest.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    pub kind: String,
    pub seed: u64,
    pub options: OptionsJson,
    pub trajectory: TrajectoryJson,
    pub views: Vec<ViewEntry>,
    pub ground_truth: GroundTruthJson,
}

pub fn image_path(view_id: usize) -> String {
    format!("images/view_{view_id:03}.dstn")
}

impl SceneManifest {
    pub fn describe(scene: &SyntheticScene, opts: &SceneOptions) -> Self {
        let g = &scene.geometry;
        let t = &scene.trajectory;
        Self {
            scene_id: scene.scene_id.clone(),
            kind: scene.kind.name().to_string(),
            seed: scene.seed,
            options: opts.into(),
            trajectory: TrajectoryJson {
                center: v3(&t.center),
                radius: t.radius,
                height: t.height,
                arc_degrees: t.arc_degrees,
            },
            views: scene
                .views
                .iter()
                .map(|c| ViewEntry {
                    camera: c.into(),
                    image: image_path(c.view_id),
                })
                .collect(),
            ground_truth: GroundTruthJson {
                surfaces: g
                    .surfaces
                    .iter()
                    .map(|s| SurfaceJson {
                        primitive: (&s.primitive).into(),
                        base_color: s.base,
                        texture_amplitude: s.amplitude,
                        texture_frequency: s.frequency,
                    })
                    .collect(),
                background: g.background,
                edit_surface: scene.edit.surface,
                edit_displacement: v3(&scene.edit.displacement),
            },
        }
    }
}

/// Writes `scene.json` and one image tensor per view under `dir`.
pub fn save_scene(dir: &Path, scene: &SyntheticScene, opts: &SceneOptions) -> Result<()> {
    let manifest = SceneManifest::describe(scene, opts);
    for (entry, img) in manifest.views.iter().zip(&scene.images) {
        write_tensor(&dir.join(&entry.image), &Tensor::from_grid(img))?;
    }
    write_json(&dir.join(SCENE_FILE), &manifest)
}

/// A scene directory, or a path straight to its `scene.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SCENE_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads and verifies a scene written by [`save_scene`].
pub fn load_scene(path: &Path) -> Result<(SyntheticScene, SceneOptions)> {
    let file = manifest_path(path);
    let dir = file.parent().unwrap_or(Path::new("."));
    let manifest: SceneManifest = read_json(&file)?;
    let kind = SceneKind::parse(&manifest.kind).ok_or_else(|| {
        Error::format(
            &file,
            format!("unknown scene kind {:?} (expected plane-billboards, textured-blobs or two-box)", manifest.kind),
        )
    })?;
    if manifest.views.len() < 2 {
        return Err(Error::format(&file, "a scene needs at least 2 views"));
    }
    let opts = SceneOptions::from(&manifest.options);
    let scene = generate_synthetic_scene(kind, manifest.views.len(), manifest.seed, &opts)?;
    let expected = SceneManifest::describe(&scene, &opts);
    if expected.scene_id != manifest.scene_id {
        return Err(Error::format(&file, format!("scene_id {:?} does not match its recipe ({:?})", manifest.scene_id, expected.scene_id)));
    }
    if expected.trajectory != manifest.trajectory {
        return Err(Error::format(&file, "trajectory does not match the scene recipe"));
    }
    if expected.ground_truth != manifest.ground_truth {
        return Err(Error::format(&file, "ground_truth does not match the scene recipe"));
    }
    for (k, (want, got)) in expected.views.iter().zip(&manifest.views).enumerate() {
        if want.camera != got.camera {
            return Err(Error::format(&file, format!("camera of view {k} does not match the scene recipe")));
        }
        let tpath = dir.join(&got.image);
        let tensor = read_tensor(&tpath)?;
        let img = &scene.images[k];
        let dims = [img.height(), img.width(), 3];
        if tensor.dims() != dims {
            return Err(Error::format(&tpath, format!("image of view {k} has shape {:?}, expected {dims:?}", tensor.dims())));
        }
        if tensor != Tensor::from_grid(img) {
            return Err(Error::format(&tpath, format!("image of view {k} differs from the rendered scene")));
        }
    }
    Ok((scene, opts))
}

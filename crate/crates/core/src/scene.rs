//! Analytic synthetic scenes with exact ground-truth geometry.
//!
//! Surfaces are unlit solid-textured primitives, so every view of a surface
//! point sees the same colour. Cameras sit on a horizontal circular arc
//! looking at the scene centre.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::drag::EditSpec;
use crate::geometry::{CameraView, Intrinsics, MaskGrid, Pointmap, Pose};
use crate::grid::{Grid, Image};
use crate::math;
use crate::rng::{derive_seed, SeededRng};
use crate::{Error, Result};

/// Which synthetic layout to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    PlaneBillboards,
    TexturedBlobs,
    TwoBox,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::PlaneBillboards, SceneKind::TexturedBlobs, SceneKind::TwoBox];

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::PlaneBillboards => "plane-billboards",
            SceneKind::TexturedBlobs => "textured-blobs",
            SceneKind::TwoBox => "two-box",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        SceneKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Ray-intersectable shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Finite rectangle spanned by two orthonormal in-plane axes.
    Rect {
        center: Vector3<f64>,
        axis_u: Vector3<f64>,
        axis_v: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        center: Vector3<f64>,
        half: Vector3<f64>,
    },
}

impl Primitive {
    pub fn center(&self) -> Vector3<f64> {
        match *self {
            Primitive::Rect { center, .. } | Primitive::Sphere { center, .. } | Primitive::Cuboid { center, .. } => center,
        }
    }

    pub fn translated(&self, d: &Vector3<f64>) -> Primitive {
        let mut p = *self;
        match &mut p {
            Primitive::Rect { center, .. } | Primitive::Sphere { center, .. } | Primitive::Cuboid { center, .. } => {
                *center += d
            }
        }
        p
    }

    /// Smallest ray parameter `t > t_min` at which `origin + t·dir` hits.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<f64> {
        match *self {
            Primitive::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => {
                let normal = axis_u.cross(&axis_v);
                let denom = normal.dot(dir);
                if math::abs(denom) < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(center - origin)) / denom;
                if t <= t_min {
                    return None;
                }
                let local = origin + dir * t - center;
                (math::abs(local.dot(&axis_u)) <= half_u && math::abs(local.dot(&axis_v)) <= half_v).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let half_b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let root = math::sqrt(disc);
                [(-half_b - root) / a, (-half_b + root) / a].into_iter().find(|&t| t > t_min)
            }
            Primitive::Cuboid { center, half } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for k in 0..3 {
                    let lo = center[k] - half[k];
                    let hi = center[k] + half[k];
                    if dir[k] == 0.0 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[k];
                    let (mut a, mut b) = ((lo - origin[k]) * inv, (hi - origin[k]) * inv);
                    if a > b {
                        core::mem::swap(&mut a, &mut b);
                    }
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|&t| t > t_min)
            }
        }
    }
}

/// Smooth solid texture: `base + amplitude · sin(f·(x + 0.6y)) · cos(f·(z - 0.8y) + phase)`
/// per channel, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub primitive: Primitive,
    pub base: [f64; 3],
    pub amplitude: f64,
    pub frequency: f64,
}

impl Surface {
    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let f = self.frequency;
        let a = math::sin(f * (p.x + 0.6 * p.y));
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let b = math::cos(f * (p.z - 0.8 * p.y) + 1.3 * c as f64);
            *o = (self.base[c] + self.amplitude * a * b).clamp(0.0, 1.0);
        }
        out
    }
}

/// First-hit record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub surface: usize,
}

/// A set of textured surfaces plus the colour seen where rays miss.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub surfaces: Vec<Surface>,
    pub background: [f64; 3],
}

impl SceneGeometry {
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (k, s) in self.surfaces.iter().enumerate() {
            if let Some(t) = s.primitive.intersect(origin, dir, 1e-9) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        surface: k,
                    });
                }
            }
        }
        best
    }

    /// Ray through the centre of pixel `(u, v)`: world origin and a world
    /// direction whose camera-frame z component is 1, so the hit parameter
    /// equals the camera depth.
    pub fn pixel_ray(cam: &CameraView, u: usize, v: usize) -> (Vector3<f64>, Vector3<f64>) {
        let inv = cam.pose.inverse();
        let origin = inv.transform_point(&Vector3::zeros());
        let dir = inv.isometry().rotation * cam.intrinsics.ray(u as f64, v as f64);
        (origin, dir)
    }

    /// Renders the colour image and the camera-frame pointmap of `cam`.
    pub fn render(&self, cam: &CameraView) -> (Image, Pointmap) {
        let mut image = Grid::zeros(cam.height, cam.width, 3);
        let mut points = Vec::with_capacity(cam.width * cam.height);
        let mut valid = Vec::with_capacity(cam.width * cam.height);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let (o, d) = Self::pixel_ray(cam, u, v);
                match self.intersect(&o, &d) {
                    Some(hit) => {
                        image.pixel_mut(v, u).copy_from_slice(&self.surfaces[hit.surface].color_at(&hit.point));
                        points.push(cam.intrinsics.ray(u as f64, v as f64) * hit.t);
                        valid.push(true);
                    }
                    None => {
                        image.pixel_mut(v, u).copy_from_slice(&self.background);
                        points.push(Vector3::zeros());
                        valid.push(false);
                    }
                }
            }
        }
        let pointmap = Pointmap {
            frame: cam.view_id,
            width: cam.width,
            height: cam.height,
            points,
            valid,
        };
        (image, pointmap)
    }

    /// Mask of pixels of `cam` whose first hit is `surface`.
    pub fn surface_mask(&self, cam: &CameraView, surface: usize) -> MaskGrid {
        MaskGrid::from_fn(cam.height, cam.width, |v, u| {
            let (o, d) = Self::pixel_ray(cam, u, v);
            match self.intersect(&o, &d) {
                Some(h) if h.surface == surface => 1.0,
                _ => 0.0,
            }
        })
    }
}

/// Rigid displacement of one surface, used as the oracle edit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthEdit {
    pub surface: usize,
    pub displacement: Vector3<f64>,
}

impl GroundTruthEdit {
    pub fn apply(&self, geometry: &SceneGeometry) -> SceneGeometry {
        let mut out = geometry.clone();
        let s = &mut out.surfaces[self.surface];
        s.primitive = s.primitive.translated(&self.displacement);
        out
    }
}

/// Camera placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
    /// Total arc swept, degrees; views are spaced evenly over `±arc/2`.
    pub arc_degrees: f64,
}

/// Resolution and trajectory knobs for [`generate_synthetic_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub width: usize,
    pub height: usize,
    pub arc_degrees: f64,
    pub radius: f64,
    pub camera_height: f64,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            arc_degrees: 60.0,
            radius: 4.0,
            camera_height: 0.8,
            focal_scale: 1.0,
        }
    }
}

/// Generated scene with everything the oracles need.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub kind: SceneKind,
    pub seed: u64,
    pub views: Vec<CameraView>,
    pub images: Vec<Image>,
    pub geometry: SceneGeometry,
    pub edit: GroundTruthEdit,
    pub trajectory: Trajectory,
}

/// Default number of views on the arc.
pub const DEFAULT_VIEWS: usize = 20;

fn jitter(rng: &mut SeededRng, scale: f64) -> f64 {
    rng.uniform_range(-scale, scale)
}

fn backdrop(rng: &mut SeededRng) -> Vec<Surface> {
    let wall = Surface {
        primitive: Primitive::Rect {
            center: Vector3::new(0.0, 0.0, 3.0),
            axis_u: Vector3::new(1.0, 0.0, 0.0),
            axis_v: Vector3::new(0.0, 1.0, 0.0),
            half_u: 12.0,
            half_v: 12.0,
        },
        base: [0.55 + jitter(rng, 0.05), 0.5, 0.45],
        amplitude: 0.15,
        frequency: 2.0,
    };
    let ground = Surface {
        primitive: Primitive::Rect {
            center: Vector3::new(0.0, -1.0, 0.0),
            axis_u: Vector3::new(0.0, 0.0, 1.0),
            axis_v: Vector3::new(1.0, 0.0, 0.0),
            half_u: 12.0,
            half_v: 12.0,
        },
        base: [0.35, 0.45 + jitter(rng, 0.05), 0.35],
        amplitude: 0.12,
        frequency: 2.5,
    };
    alloc::vec![wall, ground]
}

fn build_geometry(kind: SceneKind, rng: &mut SeededRng) -> (SceneGeometry, GroundTruthEdit) {
    let mut surfaces = backdrop(rng);
    let edit = match kind {
        SceneKind::PlaneBillboards => {
            for (k, (x, z)) in [(-0.9, 0.8), (0.2, 0.0), (1.0, 1.5)].into_iter().enumerate() {
                surfaces.push(Surface {
                    primitive: Primitive::Rect {
                        center: Vector3::new(x + jitter(rng, 0.05), -0.2 + jitter(rng, 0.05), z),
                        axis_u: Vector3::new(1.0, 0.0, 0.0),
                        axis_v: Vector3::new(0.0, 1.0, 0.0),
                        half_u: 0.45,
                        half_v: 0.55,
                    },
                    base: [0.2 + 0.3 * k as f64, 0.7 - 0.2 * k as f64, 0.3 + jitter(rng, 0.1)],
                    amplitude: 0.2,
                    frequency: 3.0,
                });
            }
            GroundTruthEdit {
                surface: 3,
                displacement: Vector3::new(0.0, 0.35, 0.0),
            }
        }
        SceneKind::TexturedBlobs => {
            for (k, (x, r)) in [(-0.9, 0.45), (0.25, 0.5), (1.1, 0.35)].into_iter().enumerate() {
                surfaces.push(Surface {
                    primitive: Primitive::Sphere {
                        center: Vector3::new(x + jitter(rng, 0.05), -1.0 + r + 0.05, 0.2 * k as f64),
                        radius: r,
                    },
                    base: [0.8 - 0.25 * k as f64, 0.3 + 0.2 * k as f64, 0.5 + jitter(rng, 0.1)],
                    amplitude: 0.18,
                    frequency: 4.0,
                });
            }
            GroundTruthEdit {
                surface: 3,
                displacement: Vector3::new(0.35, 0.0, 0.0),
            }
        }
        SceneKind::TwoBox => {
            surfaces.push(Surface {
                primitive: Primitive::Cuboid {
                    center: Vector3::new(-0.65 + jitter(rng, 0.05), -0.45, 0.2),
                    half: Vector3::new(0.4, 0.55, 0.4),
                },
                base: [0.85, 0.35 + jitter(rng, 0.05), 0.25],
                amplitude: 0.12,
                frequency: 3.5,
            });
            surfaces.push(Surface {
                primitive: Primitive::Cuboid {
                    center: Vector3::new(0.7 + jitter(rng, 0.05), -0.6, -0.1),
                    half: Vector3::new(0.32, 0.4, 0.32),
                },
                base: [0.2, 0.35, 0.85 + jitter(rng, 0.05)],
                amplitude: 0.12,
                frequency: 3.5,
            });
            GroundTruthEdit {
                surface: 3,
                displacement: Vector3::new(0.0, 0.4, 0.0),
            }
        }
    };
    (
        SceneGeometry {
            surfaces,
            background: [0.1, 0.1, 0.12],
        },
        edit,
    )
}

/// Cameras evenly spaced on the arc of `traj`.
pub fn arc_cameras(traj: &Trajectory, n_views: usize, opts: &SceneOptions) -> Result<Vec<CameraView>> {
    let focal = opts.focal_scale * opts.width as f64;
    let intr = Intrinsics::new(focal, focal, (opts.width as f64 - 1.0) / 2.0, (opts.height as f64 - 1.0) / 2.0);
    (0..n_views)
        .map(|k| {
            let frac = if n_views == 1 { 0.5 } else { k as f64 / (n_views - 1) as f64 };
            let angle = (frac - 0.5) * traj.arc_degrees.to_radians();
            let eye = traj.center
                + Vector3::new(traj.radius * math::sin(angle), traj.height, -traj.radius * math::cos(angle));
            let pose = Pose::look_at(eye, traj.center, Vector3::new(0.0, 1.0, 0.0))?;
            CameraView::new(k, pose, intr, opts.width, opts.height)
        })
        .collect()
}

/// Builds a deterministic scene of `kind` seen from `n_views` cameras.
pub fn generate_synthetic_scene(kind: SceneKind, n_views: usize, seed: u64, opts: &SceneOptions) -> Result<SyntheticScene> {
    if n_views < 2 {
        return Err(Error::invalid(format!("a scene needs at least 2 views, got {n_views}")));
    }
    if opts.width == 0 || opts.height == 0 {
        return Err(Error::invalid("image resolution must be positive"));
    }
    let mut rng = SeededRng::new(derive_seed(seed, kind as u64 + 1));
    let (geometry, edit) = build_geometry(kind, &mut rng);
    let trajectory = Trajectory {
        center: Vector3::new(0.0, -0.3, 0.3),
        radius: opts.radius,
        height: opts.camera_height,
        arc_degrees: opts.arc_degrees,
    };
    let views = arc_cameras(&trajectory, n_views, opts)?;
    let images = views.iter().map(|cam| geometry.render(cam).0).collect();
    Ok(SyntheticScene {
        scene_id: format!("{}-s{seed}-v{n_views}", kind.name()),
        kind,
        seed,
        views,
        images,
        geometry,
        edit,
        trajectory,
    })
}

impl SyntheticScene {
    /// Central view, the default reference.
    pub fn default_reference(&self) -> usize {
        self.views.len() / 2
    }

    pub fn edited_geometry(&self) -> SceneGeometry {
        self.edit.apply(&self.geometry)
    }

    /// Drag instruction reproducing the embedded edit in view `ref_view`:
    /// one handle at the projected centre of the moved surface, its target
    /// at the projected displaced centre, and a mask covering the surface
    /// before and after the move, dilated by `mask_margin` pixels.
    pub fn ground_truth_edit_spec(&self, ref_view: usize, mask_margin: usize) -> Result<EditSpec> {
        let cam = self
            .views
            .get(ref_view)
            .ok_or_else(|| Error::contract(format!("unknown view {ref_view}")))?;
        let before = self.geometry.surface_mask(cam, self.edit.surface);
        let after = self.edited_geometry().surface_mask(cam, self.edit.surface);
        let union = MaskGrid::from_fn(cam.height, cam.width, |v, u| before.get(v, u).max(after.get(v, u)));
        let mask = union.dilate(mask_margin);
        let c = self.geometry.surfaces[self.edit.surface].primitive.center();
        let h = cam.project_world(&c);
        let t = cam.project_world(&(c + self.edit.displacement));
        let clampu = |x: f64| x.clamp(0.0, (cam.width - 1) as f64);
        let clampv = |x: f64| x.clamp(0.0, (cam.height - 1) as f64);
        EditSpec::new(
            ref_view,
            mask,
            alloc::vec![(clampu(h.u), clampv(h.v))],
            alloc::vec![(clampu(t.u), clampv(t.v))],
        )
    }

    /// Same scene geometry with the handles placed on their targets: an
    /// edit that asks for no motion.
    pub fn noop_edit_spec(&self, ref_view: usize, mask_margin: usize) -> Result<EditSpec> {
        let mut spec = self.ground_truth_edit_spec(ref_view, mask_margin)?;
        spec.targets = spec.handles.clone();
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let o = SceneOptions::default();
        let a = generate_synthetic_scene(SceneKind::TwoBox, 4, 7, &o).unwrap();
        let b = generate_synthetic_scene(SceneKind::TwoBox, 4, 7, &o).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(SceneKind::TwoBox, 4, 8, &o).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn twenty_views_on_arc() {
        let s = generate_synthetic_scene(SceneKind::PlaneBillboards, DEFAULT_VIEWS, 1, &SceneOptions::default()).unwrap();
        assert_eq!(s.views.len(), 20);
        assert_eq!(s.images.len(), 20);
        for cam in &s.views {
            let centre = cam.pose.inverse().transform_point(&Vector3::zeros()) - s.trajectory.center;
            let horizontal = math::sqrt(centre.x * centre.x + centre.z * centre.z);
            assert!((horizontal - s.trajectory.radius).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_views_rejected() {
        assert!(generate_synthetic_scene(SceneKind::TwoBox, 1, 0, &SceneOptions::default()).is_err());
    }

    #[test]
    fn pixels_mostly_valid_and_in_range() {
        for kind in SceneKind::ALL {
            let s = generate_synthetic_scene(kind, 3, 2, &SceneOptions::default()).unwrap();
            let (img, pm) = s.geometry.render(&s.views[1]);
            assert!(pm.valid_count() * 10 >= pm.valid.len() * 9, "{kind:?}");
            assert!(img.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn edit_spec_mask_covers_handle() {
        let s = generate_synthetic_scene(SceneKind::TwoBox, 5, 3, &SceneOptions::default()).unwrap();
        let spec = s.ground_truth_edit_spec(2, 2).unwrap();
        let (u, v) = spec.handles[0];
        assert_eq!(spec.mask.get(v.round() as usize, u.round() as usize), 1.0);
        assert!(spec.handles[0] != spec.targets[0]);
    }
}

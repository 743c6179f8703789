//! Pinhole cameras, rigid poses, pointmaps and their frame changes.
//!
//! Poses are world-to-camera: `x_cam = R x_world + t`. A pointmap carries the
//! id of the camera frame its points are expressed in.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Rotation3, Translation3, UnitQuaternion, Vector3, Vector4};

pub use crate::grid::MaskGrid;
use crate::math;
use crate::splat::{resolve_zbuffer, SplatCandidate};
use crate::{Error, Result};

/// Points at or closer than this depth are never visible.
pub const Z_NEAR: f64 = 1e-3;
/// Two splats whose depths differ by no more than this are z-buffer ties.
pub const DEPTH_EPS: f64 = 1e-4;
/// Tolerance on `RᵀR = I` and `det R = 1` for user-supplied poses.
pub const RIGID_TOL: f64 = 1e-9;

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Isometry3<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Isometry3::identity())
    }

    pub fn from_isometry(iso: Isometry3<f64>) -> Self {
        Pose(iso)
    }

    /// Builds a pose from a 4×4 matrix, rejecting anything that is not a
    /// proper rigid motion.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("pose bottom row must be (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > RIGID_TOL {
            return Err(Error::invalid(format!("pose rotation not orthonormal (error {ortho:e})")));
        }
        let det = r.determinant();
        if math::abs(det - 1.0) > RIGID_TOL {
            return Err(Error::invalid(format!("pose rotation determinant {det} != 1")));
        }
        let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Ok(Pose(Isometry3::from_parts(Translation3::from(t), rot)))
    }

    /// Rotation given as an axis-angle vector (radians) followed by a
    /// translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose(Isometry3::new(translation, axis_angle))
    }

    /// Camera at `eye` looking at `target` with `up` roughly up in the image
    /// (image v axis points down, z forward).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at eye coincides with target"));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::invalid("look_at up vector parallel to view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // rows of R are the camera axes in world coordinates
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Ok(Pose(Isometry3::from_parts(Translation3::from(t), rot)))
    }

    pub fn isometry(&self) -> &Isometry3<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.translation.vector
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.0.to_homogeneous()
    }

    pub fn inverse(&self) -> Pose {
        Pose(self.0.inverse())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_point(&Point3::from(*p)).coords
    }

    /// Left-multiplies a tangent increment: `R ← Exp(ω) R`, `t ← Exp(ω) t + v`.
    pub fn retract(&self, omega: &Vector3<f64>, v: &Vector3<f64>) -> Pose {
        let delta = UnitQuaternion::from_scaled_axis(*omega);
        let rotation = delta * self.0.rotation;
        let translation = delta * self.0.translation.vector + v;
        Pose(Isometry3::from_parts(Translation3::from(translation), rotation))
    }

    /// Geodesic angle between the two rotations (radians).
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        self.0.rotation.angle_to(&other.0.rotation)
    }

    /// Euclidean distance between the translation parts.
    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation() - other.translation()).norm()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Intrinsics of the same camera sampled `stride` times more coarsely.
    /// Pixel centres stay on integer coordinates, so `u' = u / stride`.
    pub fn downscaled(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
        }
    }

    /// Camera-frame direction through pixel `(u, v)` with unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// One view of the scene: pose, intrinsics and resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub view_id: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

/// A camera-frame point projected to continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Nearest pixel `(row, col)` when the projection is visible in a
    /// `width × height` image.
    pub fn pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if !(self.depth > Z_NEAR) || !self.u.is_finite() || !self.v.is_finite() {
            return None;
        }
        let (ur, vr) = (math::round(self.u), math::round(self.v));
        if ur < 0.0 || vr < 0.0 || ur >= width as f64 || vr >= height as f64 {
            return None;
        }
        Some((vr as usize, ur as usize))
    }

    /// Squared distance from the projection to the centre of `pixel`.
    pub fn center_dist2(&self, pixel: (usize, usize)) -> f64 {
        let du = self.u - pixel.1 as f64;
        let dv = self.v - pixel.0 as f64;
        du * du + dv * dv
    }
}

impl CameraView {
    pub fn new(view_id: usize, pose: Pose, intrinsics: Intrinsics, width: usize, height: usize) -> Result<Self> {
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            view_id,
            pose,
            intrinsics,
            width,
            height,
        })
    }

    /// Same camera at `1/stride` resolution.
    pub fn downscaled(&self, stride: usize) -> Result<Self> {
        if stride == 0 || !self.width.is_multiple_of(stride) || !self.height.is_multiple_of(stride) {
            return Err(Error::contract(format!(
                "{}x{} view not divisible by stride {stride}",
                self.width, self.height
            )));
        }
        Ok(Self {
            view_id: self.view_id,
            pose: self.pose,
            intrinsics: self.intrinsics.downscaled(stride),
            width: self.width / stride,
            height: self.height / stride,
        })
    }

    /// The same camera with its pose re-expressed relative to `anchor`
    /// (so `anchor` itself becomes the identity).
    pub fn relative_to(&self, anchor: &Pose) -> Self {
        Self {
            pose: self.pose.compose(&anchor.inverse()),
            ..self.clone()
        }
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Projection {
        let Intrinsics { fx, fy, cx, cy } = self.intrinsics;
        Projection {
            u: fx * p.x / p.z + cx,
            v: fy * p.y / p.z + cy,
            depth: p.z,
        }
    }

    pub fn project_world(&self, p: &Vector3<f64>) -> Projection {
        self.project_camera(&self.pose.transform_point(p))
    }

    /// World point seen at pixel `(u, v)` at camera depth `depth`.
    pub fn lift(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let c = self.intrinsics.ray(u, v) * depth;
        self.pose.inverse().transform_point(&c)
    }
}

/// Per-pixel 3D points with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn new(frame: usize, width: usize, height: usize, points: Vec<Vector3<f64>>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if points.len() != n || valid.len() != n {
            return Err(Error::contract(format!("pointmap buffers must hold {n} entries")));
        }
        if points.iter().zip(&valid).any(|(p, &ok)| ok && !p.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("valid pointmap entry is not finite"));
        }
        Ok(Self {
            frame,
            width,
            height,
            points,
            valid,
        })
    }

    pub fn invalid(frame: usize, width: usize, height: usize) -> Self {
        Self {
            frame,
            width,
            height,
            points: alloc::vec![Vector3::zeros(); width * height],
            valid: alloc::vec![false; width * height],
        }
    }

    #[inline]
    pub fn index(&self, v: usize, u: usize) -> usize {
        v * self.width + u
    }

    pub fn get(&self, v: usize, u: usize) -> Option<&Vector3<f64>> {
        let i = self.index(v, u);
        self.valid[i].then(|| &self.points[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Mean Euclidean norm of the valid points, or `None` when empty.
    pub fn mean_norm(&self) -> Option<f64> {
        let (sum, n) = self
            .points
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold((0.0, 0usize), |(s, n), (p, _)| (s + p.norm(), n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// `h(x, y, z) = (x, y, z, 1)`.
pub fn homogenize(p: &Vector3<f64>) -> Result<Vector4<f64>> {
    if !p.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("cannot homogenize a non-finite point"));
    }
    Ok(Vector4::new(p.x, p.y, p.z, 1.0))
}

/// Re-expresses `pointmap` (in `src`'s frame) in `dst`'s frame:
/// `X' = P_dst · P_src⁻¹ · h(X)` on every valid pixel.
pub fn transform_pointmap(pointmap: &Pointmap, src: &CameraView, dst: &CameraView) -> Result<Pointmap> {
    if pointmap.frame != src.view_id {
        return Err(Error::contract(format!(
            "pointmap is in frame {} but source view is {}",
            pointmap.frame, src.view_id
        )));
    }
    for cam in [src, dst] {
        let m = cam.pose.to_matrix();
        if m.iter().any(|x| !x.is_finite()) || math::abs(m.fixed_view::<3, 3>(0, 0).determinant()) < 1e-12 {
            return Err(Error::invalid(format!("view {} has a singular pose", cam.view_id)));
        }
    }
    if src.pose == dst.pose {
        return Ok(Pointmap {
            frame: dst.view_id,
            ..pointmap.clone()
        });
    }
    let relative = dst.pose.compose(&src.pose.inverse()).to_matrix();
    let points = pointmap
        .points
        .iter()
        .zip(&pointmap.valid)
        .map(|(p, &ok)| {
            if !ok {
                return Ok(*p);
            }
            let q = relative * homogenize(p)?;
            Ok(Vector3::new(q.x / q.w, q.y / q.w, q.z / q.w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pointmap {
        frame: dst.view_id,
        width: pointmap.width,
        height: pointmap.height,
        points,
        valid: pointmap.valid.clone(),
    })
}

/// Per-pixel projection of a pointmap into its own camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPointmap {
    /// Continuous `(u, v)` per source pixel.
    pub pixels: Vec<(f64, f64)>,
    pub depth: Vec<f64>,
    /// 1 where the point is valid, in front of `Z_NEAR` and inside the image.
    pub visibility: MaskGrid,
}

/// Projects every point of `pointmap` (already in `cam`'s frame).
pub fn project(pointmap: &Pointmap, cam: &CameraView) -> Result<ProjectedPointmap> {
    if pointmap.frame != cam.view_id {
        return Err(Error::contract(format!(
            "pointmap is in frame {} but camera is view {}",
            pointmap.frame, cam.view_id
        )));
    }
    let mut pixels = Vec::with_capacity(pointmap.points.len());
    let mut depth = Vec::with_capacity(pointmap.points.len());
    let mut visibility = MaskGrid::zeros(pointmap.height, pointmap.width);
    for (i, (p, &ok)) in pointmap.points.iter().zip(&pointmap.valid).enumerate() {
        let proj = cam.project_camera(p);
        pixels.push((proj.u, proj.v));
        depth.push(proj.depth);
        if ok && proj.pixel(cam.width, cam.height).is_some() {
            visibility.set(i / pointmap.width, i % pointmap.width, 1.0);
        }
    }
    Ok(ProjectedPointmap {
        pixels,
        depth,
        visibility,
    })
}

/// Carries a reference-view mask into `dst`.
///
/// Every valid reference pixel is lifted through `reference_points`, moved
/// into `dst`'s frame and splatted to its nearest pixel through a z-buffer.
/// Covered pixels take the winning splat's mask value; a radius-1 closing then
/// fills splat holes.
pub fn warp_mask(mask: &MaskGrid, reference_points: &Pointmap, reference: &CameraView, dst: &CameraView) -> Result<MaskGrid> {
    if mask.width() != reference_points.width || mask.height() != reference_points.height {
        return Err(Error::contract("mask resolution does not match the reference pointmap"));
    }
    if mask.is_empty() {
        return Ok(MaskGrid::zeros(dst.height, dst.width));
    }
    let moved = transform_pointmap(reference_points, reference, dst)?;
    let candidates: Vec<SplatCandidate> = moved
        .points
        .iter()
        .zip(&moved.valid)
        .enumerate()
        .filter(|(_, (_, &ok))| ok)
        .filter_map(|(i, (p, _))| {
            let proj = dst.project_camera(p);
            proj.pixel(dst.width, dst.height).map(|pixel| SplatCandidate {
                pixel,
                depth: proj.depth,
                center_dist2: proj.center_dist2(pixel),
                key: i as u64,
            })
        })
        .collect();
    let winners = resolve_zbuffer(dst.width, dst.height, &candidates);
    let mut out = MaskGrid::zeros(dst.height, dst.width);
    for (pixel, winner) in winners.iter().enumerate() {
        if let Some(c) = winner {
            let src = candidates[*c].key as usize;
            out.set(pixel / dst.width, pixel % dst.width, mask.values()[src]);
        }
    }
    Ok(out.close(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cam(id: usize, pose: Pose) -> CameraView {
        CameraView::new(id, pose, Intrinsics::new(100.0, 100.0, 64.0, 64.0), 128, 128).unwrap()
    }

    #[test]
    fn homogenize_appends_one() {
        assert_eq!(homogenize(&Vector3::zeros()).unwrap(), Vector4::new(0.0, 0.0, 0.0, 1.0));
        assert_eq!(homogenize(&Vector3::new(1.0, 2.0, 3.0)).unwrap(), Vector4::new(1.0, 2.0, 3.0, 1.0));
        assert_eq!(
            homogenize(&Vector3::new(-4.5, 0.0, 9.0)).unwrap(),
            Vector4::new(-4.5, 0.0, 9.0, 1.0)
        );
        assert!(matches!(
            homogenize(&Vector3::new(f64::NAN, 0.0, 0.0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn from_matrix_rejects_non_rigid() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(Pose::from_matrix(&m).is_err());
        let mut reflect = Matrix4::identity();
        reflect[(2, 2)] = -1.0;
        assert!(Pose::from_matrix(&reflect).is_err());
        assert!(Pose::from_matrix(&Matrix4::zeros()).is_err());
    }

    #[test]
    fn transform_rejects_frame_mismatch() {
        let x = Pointmap::invalid(3, 2, 2);
        let a = cam(0, Pose::identity());
        assert!(matches!(transform_pointmap(&x, &a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn pure_translation_moves_point() {
        let a = cam(0, Pose::identity());
        let b = cam(1, Pose::from_axis_angle(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)));
        let x = Pointmap::new(0, 1, 1, vec![Vector3::new(0.0, 0.0, 1.0)], vec![true]).unwrap();
        let y = transform_pointmap(&x, &a, &b).unwrap();
        assert_eq!(y.frame, 1);
        assert!((y.points[0] - Vector3::new(1.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let c = cam(0, Pose::identity());
        let x = Pointmap::new(
            0,
            3,
            1,
            vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.64, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)],
            vec![true; 3],
        )
        .unwrap();
        let p = project(&x, &c).unwrap();
        assert_eq!(p.pixels[0], (64.0, 64.0));
        assert_eq!(p.depth[0], 1.0);
        assert!((p.pixels[1].0 - 128.0).abs() < 1e-12 && p.pixels[1].1 == 64.0);
        assert_eq!(p.visibility.get(0, 0), 1.0);
        assert_eq!(p.visibility.get(0, 2), 0.0);
    }

    #[test]
    fn lift_then_project_recovers_pixel() {
        let c = cam(0, Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, 0.1, 2.0)));
        let w = c.lift(17.25, 90.5, 3.7);
        let p = c.project_world(&w);
        assert!((p.u - 17.25).abs() < 1e-9 && (p.v - 90.5).abs() < 1e-9);
        assert!((p.depth - 3.7).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_warps_to_zero() {
        let a = cam(0, Pose::identity());
        let b = cam(1, Pose::from_axis_angle(Vector3::new(0.0, 0.1, 0.0), Vector3::zeros()));
        let x = Pointmap::invalid(0, 128, 128);
        let m = warp_mask(&MaskGrid::zeros(128, 128), &x, &a, &b).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let c = pose.transform_point(&Vector3::zeros());
        assert!((c - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
    }
}

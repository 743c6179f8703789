//! Attributed point cloud carrying reference latents and mask weights, and
//! its z-buffered rendering into other views at latent resolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::alignment::AlignmentState;
use crate::geometry::CameraView;
use crate::grid::{Grid, LatentGrid, MaskGrid};
use crate::splat::{resolve_zbuffer, SplatCandidate};
use crate::{Error, Result};

/// World points with one latent vector and one mask weight each.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedPointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Row-major `N × channels`.
    pub latents: Vec<f64>,
    pub channels: usize,
    pub mask_weights: Vec<f64>,
    /// `(u, v)` pixel of the reference view each point came from.
    pub source_pixel: Vec<(usize, usize)>,
    /// Width of the reference image, used to key points by source pixel.
    pub source_width: usize,
    pub timestep: usize,
    pub latent_stride: usize,
}

impl AttributedPointCloud {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        latents: Vec<f64>,
        channels: usize,
        mask_weights: Vec<f64>,
        source_pixel: Vec<(usize, usize)>,
        source_width: usize,
        timestep: usize,
        latent_stride: usize,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::EmptyScene("attributed point cloud has no points".into()));
        }
        if latents.len() != n * channels || mask_weights.len() != n || source_pixel.len() != n {
            return Err(Error::contract("point cloud attribute lengths disagree"));
        }
        if !latents.iter().all(|x| x.is_finite()) || !positions.iter().all(|p| p.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("point cloud holds non-finite values"));
        }
        if mask_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("mask weights must lie in [0, 1]"));
        }
        if latent_stride == 0 {
            return Err(Error::invalid("latent stride must be positive"));
        }
        Ok(Self {
            positions,
            latents,
            channels,
            mask_weights,
            source_pixel,
            source_width,
            timestep,
            latent_stride,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i * self.channels..(i + 1) * self.channels]
    }

    fn key(&self, i: usize) -> u64 {
        let (u, v) = self.source_pixel[i];
        (v * self.source_width + u) as u64
    }

    /// Reorders the points by `perm` (point `k` of the result is point
    /// `perm[k]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("not a permutation of the cloud"));
        }
        let mut latents = Vec::with_capacity(self.latents.len());
        for &p in perm {
            latents.extend_from_slice(self.latent(p));
        }
        Ok(Self {
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            latents,
            mask_weights: perm.iter().map(|&p| self.mask_weights[p]).collect(),
            source_pixel: perm.iter().map(|&p| self.source_pixel[p]).collect(),
            ..self.clone()
        })
    }
}

/// One point per valid reference pixel, placed at the fused reference
/// pointmap, carrying the bilinear sample of `ref_latent` at latent
/// coordinate `pixel / stride` and the mask value at the pixel.
pub fn build_attributed_cloud(aligned: &AlignmentState, ref_latent: &LatentGrid, mask: &MaskGrid) -> Result<AttributedPointCloud> {
    if aligned.is_empty() {
        return Err(Error::contract("alignment state holds no views"));
    }
    let cam = aligned.reference();
    let fused = &aligned.fused[0];
    let stride = ref_latent.latent_stride;
    let (h, w, c) = ref_latent.shape();
    if stride == 0 || h * stride != cam.height || w * stride != cam.width {
        return Err(Error::contract(format!(
            "{h}x{w} latent at stride {stride} does not cover the {}x{} reference view",
            cam.height, cam.width
        )));
    }
    if mask.width() != cam.width || mask.height() != cam.height {
        return Err(Error::contract("mask resolution does not match the reference view"));
    }
    let s = stride as f64;
    let mut positions = Vec::new();
    let mut latents = Vec::new();
    let mut weights = Vec::new();
    let mut source = Vec::new();
    let mut buf = vec![0.0; c];
    for v in 0..fused.height {
        for u in 0..fused.width {
            let Some(p) = fused.get(v, u) else { continue };
            ref_latent.values.sample_bilinear(u as f64 / s, v as f64 / s, &mut buf);
            positions.push(*p);
            latents.extend_from_slice(&buf);
            weights.push(mask.get(v, u));
            source.push((u, v));
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyScene("reference view has no valid pixels".into()));
    }
    AttributedPointCloud::new(positions, latents, c, weights, source, cam.width, ref_latent.timestep, stride)
}

/// Latent and mask maps of a cloud seen from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMaps {
    pub latent_map: LatentGrid,
    pub mask_map: MaskGrid,
    /// Row-major; true where at least one point landed.
    pub coverage: Vec<bool>,
    /// Reference source pixel `(u, v)` of the winning point per latent pixel.
    pub source: Vec<Option<(usize, usize)>>,
}

impl RenderedMaps {
    pub fn covered(&self, v: usize, u: usize) -> bool {
        self.coverage[v * self.mask_map.width() + u]
    }

    pub fn coverage_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

/// Splats every point to its nearest latent pixel of `cam` (intrinsics
/// divided by `latent_stride`); the nearest surviving point gives the pixel
/// its latent and mask value. Uncovered pixels stay zero.
pub fn render_latent_map(cloud: &AttributedPointCloud, cam: &CameraView, latent_stride: usize) -> Result<RenderedMaps> {
    let lc = cam.downscaled(latent_stride)?;
    let (w, h) = (lc.width, lc.height);
    let candidates: Vec<(usize, SplatCandidate)> = cloud
        .positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let proj = lc.project_world(p);
            proj.pixel(w, h).map(|pixel| {
                (
                    i,
                    SplatCandidate {
                        pixel,
                        depth: proj.depth,
                        center_dist2: proj.center_dist2(pixel),
                        key: cloud.key(i),
                    },
                )
            })
        })
        .collect();
    let splats: Vec<SplatCandidate> = candidates.iter().map(|(_, c)| *c).collect();
    let winners = resolve_zbuffer(w, h, &splats);
    let mut latent = Grid::zeros(h, w, cloud.channels);
    let mut mask = MaskGrid::zeros(h, w);
    let mut coverage = vec![false; w * h];
    let mut source = vec![None; w * h];
    for (pix, win) in winners.iter().enumerate() {
        if let Some(k) = win {
            let i = candidates[*k].0;
            let (v, u) = (pix / w, pix % w);
            latent.pixel_mut(v, u).copy_from_slice(cloud.latent(i));
            mask.set(v, u, cloud.mask_weights[i]);
            coverage[pix] = true;
            source[pix] = Some(cloud.source_pixel[i]);
        }
    }
    Ok(RenderedMaps {
        latent_map: LatentGrid::new(latent, cloud.timestep, latent_stride),
        mask_map: mask,
        coverage,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pointmap, Pose};

    fn flat_state(width: usize, height: usize, depth: f64) -> AlignmentState {
        let intr = Intrinsics::new(width as f64, width as f64, (width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
        let cam = CameraView::new(0, Pose::identity(), intr, width, height).unwrap();
        let points = (0..height)
            .flat_map(|v| (0..width).map(move |u| (u, v)))
            .map(|(u, v)| intr.ray(u as f64, v as f64) * depth)
            .collect();
        let fused = Pointmap::new(0, width, height, points, vec![true; width * height]).unwrap();
        AlignmentState {
            cameras: vec![cam],
            fused: vec![fused],
            scales: vec![1.0],
        }
    }

    #[test]
    fn constant_field_and_full_mask() {
        let st = flat_state(8, 8, 2.0);
        let lat = LatentGrid::new(Grid::filled(4, 4, 3, 0.7), 20, 2);
        let cloud = build_attributed_cloud(&st, &lat, &MaskGrid::ones(8, 8)).unwrap();
        assert_eq!(cloud.len(), 64);
        assert!(cloud.latents.iter().all(|&x| x == 0.7));
        assert!(cloud.mask_weights.iter().all(|&x| x == 1.0));
        assert_eq!(cloud.timestep, 20);
    }

    #[test]
    fn checkerboard_bilinear_at_stride_eight() {
        let st = flat_state(32, 32, 2.0);
        let board = Grid::from_fn(4, 4, 1, |v, u, _| ((u + v) % 2) as f64);
        let lat = LatentGrid::new(board.clone(), 20, 8);
        let cloud = build_attributed_cloud(&st, &lat, &MaskGrid::zeros(32, 32)).unwrap();
        let at = |u: usize, v: usize| cloud.latent(cloud.source_pixel.iter().position(|&p| p == (u, v)).unwrap())[0];
        // pixel (8, 8) sits on latent (1, 1)
        assert_eq!(at(8, 8), board.get(1, 1, 0));
        // pixel (12, 8) sits halfway between latent (1, 1) and (2, 1)
        assert!((at(12, 8) - 0.5 * (board.get(1, 1, 0) + board.get(1, 2, 0))).abs() < 1e-12);
        // pixel (10, 14): x = 1.25, y = 1.75
        let (fx, fy) = (0.25, 0.75);
        let hand = (1.0 - fx) * (1.0 - fy) * board.get(1, 1, 0)
            + fx * (1.0 - fy) * board.get(1, 2, 0)
            + (1.0 - fx) * fy * board.get(2, 1, 0)
            + fx * fy * board.get(2, 2, 0);
        assert!((at(10, 14) - hand).abs() < 1e-12);
    }

    #[test]
    fn no_valid_pixels_is_empty_scene() {
        let mut st = flat_state(4, 4, 1.0);
        st.fused[0].valid.iter_mut().for_each(|v| *v = false);
        let lat = LatentGrid::new(Grid::zeros(2, 2, 1), 0, 2);
        assert!(matches!(build_attributed_cloud(&st, &lat, &MaskGrid::zeros(4, 4)), Err(Error::EmptyScene(_))));
    }

    #[test]
    fn reference_round_trip() {
        let st = flat_state(16, 16, 3.0);
        let lat = LatentGrid::new(Grid::from_fn(4, 4, 2, |v, u, c| (v * 7 + u * 3 + c) as f64 * 0.1), 20, 4);
        let cloud = build_attributed_cloud(&st, &lat, &MaskGrid::ones(16, 16)).unwrap();
        let maps = render_latent_map(&cloud, st.reference(), 4).unwrap();
        assert_eq!(maps.coverage_count(), 16);
        for v in 0..4 {
            for u in 0..4 {
                assert_eq!(maps.source[v * 4 + u], Some((4 * u, 4 * v)));
                for c in 0..2 {
                    assert!((maps.latent_map.values.get(v, u, c) - lat.values.get(v, u, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn looking_away_covers_nothing() {
        let st = flat_state(8, 8, 2.0);
        let cloud = build_attributed_cloud(&st, &LatentGrid::new(Grid::zeros(4, 4, 1), 0, 2), &MaskGrid::ones(8, 8)).unwrap();
        let mut cam = st.reference().clone();
        cam.pose = Pose::from_axis_angle(Vector3::new(0.0, core::f64::consts::PI, 0.0), Vector3::zeros());
        let maps = render_latent_map(&cloud, &cam, 2).unwrap();
        assert_eq!(maps.coverage_count(), 0);
        assert!(maps.latent_map.values.data().iter().all(|&x| x == 0.0));
        assert!(maps.mask_map.is_empty());
    }

    #[test]
    fn nearer_point_wins() {
        let intr = Intrinsics::new(2.0, 2.0, 1.0, 1.0);
        let cam = CameraView::new(0, Pose::identity(), intr, 4, 4).unwrap();
        let ray = intr.ray(2.0, 2.0);
        let cloud = AttributedPointCloud::new(
            vec![ray * 5.0, ray * 2.0],
            vec![-1.0, 1.0],
            1,
            vec![0.2, 0.9],
            vec![(0, 0), (1, 0)],
            4,
            20,
            1,
        )
        .unwrap();
        let maps = render_latent_map(&cloud, &cam, 1).unwrap();
        assert_eq!(maps.latent_map.values.get(2, 2, 0), 1.0);
        assert_eq!(maps.mask_map.get(2, 2), 0.9);
        assert_eq!(maps.coverage_count(), 1);
    }
}

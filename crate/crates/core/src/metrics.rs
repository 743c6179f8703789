//! Cross-view consistency scores of an edited scene.
//!
//! All three scores are read through the attributed point cloud, so the
//! propagated result and any baseline are measured on the same geometry:
//!
//! * masked latent variance: every masked cloud point is looked up in the
//!   latent grid of each view that sees it (z-buffered), and the variance of
//!   those latents across views is averaged over points;
//! * masked agreement: mean L1 between each view and the edited reference
//!   carried into it through the cloud, over masked pixels;
//! * preservation PSNR: each view against its unedited codec round trip
//!   outside the dilated projected mask.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::diffusion::Decoder;
use crate::geometry::CameraView;
use crate::grid::{Image, MaskGrid};
use crate::latent_field::{render_latent_map, AttributedPointCloud};
use crate::{Error, Result};

/// Reported instead of infinity when a view matches its unedited image
/// exactly.
pub const PSNR_CAP_DB: f64 = 99.0;

/// One view as seen by the metrics.
#[derive(Debug, Clone, Copy)]
pub struct MetricView<'a> {
    /// Camera in the cloud's frame.
    pub cam: &'a CameraView,
    pub edited: &'a Image,
    /// The view as the codec reproduces it without any edit.
    pub unedited: &'a Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub view_id: usize,
    /// Mean L1 against the carried reference; 0 when no masked pixel is
    /// covered.
    pub agreement_l1: f64,
    pub agreement_pixels: usize,
    pub preservation_psnr: f64,
    pub preserved_pixels: usize,
    /// Masked cloud points this view sees.
    pub visible_masked_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub masked_latent_variance: f64,
    /// Masked points seen by at least two views.
    pub variance_points: usize,
    pub masked_agreement_l1: f64,
    pub min_preservation_psnr: f64,
    pub mean_preservation_psnr: f64,
    pub per_view: Vec<ViewMetrics>,
}

impl ConsistencyReport {
    pub fn is_well_formed(&self) -> bool {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        ok(self.masked_latent_variance)
            && ok(self.masked_agreement_l1)
            && ok(self.min_preservation_psnr)
            && ok(self.mean_preservation_psnr)
            && self
                .per_view
                .iter()
                .all(|v| ok(v.agreement_l1) && ok(v.preservation_psnr))
    }
}

/// PSNR in dB for values in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * crate::math::log10(mse)).clamp(0.0, PSNR_CAP_DB)
}

/// Population variance of equally long vectors, averaged over components.
pub fn cross_sample_variance(samples: &[&[f64]]) -> f64 {
    let Some(first) = samples.first() else {
        return 0.0;
    };
    let (k, c) = (samples.len() as f64, first.len());
    if c == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ch in 0..c {
        let mean = samples.iter().map(|s| s[ch]).sum::<f64>() / k;
        total += samples.iter().map(|s| (s[ch] - mean) * (s[ch] - mean)).sum::<f64>() / k;
    }
    total / c as f64
}

/// Scores `views` against the cloud. `ref_index` is the position of the
/// reference view in `views`.
pub fn consistency_metrics<C: Decoder + ?Sized>(
    views: &[MetricView<'_>],
    ref_index: usize,
    cloud: &AttributedPointCloud,
    codec: &C,
    mask_threshold: f64,
) -> Result<ConsistencyReport> {
    if ref_index >= views.len() {
        return Err(Error::contract(format!("reference index {ref_index} out of {} views", views.len())));
    }
    let stride = codec.stride();
    for v in views {
        let (h, w) = (v.cam.height, v.cam.width);
        for img in [v.edited, v.unedited] {
            if img.height() != h || img.width() != w || img.channels() != 3 {
                return Err(Error::contract(format!("view {} image does not match its camera", v.cam.view_id)));
            }
        }
    }
    let masked: BTreeSet<(usize, usize)> = cloud
        .source_pixel
        .iter()
        .zip(&cloud.mask_weights)
        .filter(|(_, &m)| m >= mask_threshold)
        .map(|(&s, _)| s)
        .collect();
    let reference = views[ref_index].edited;

    // latents seen per masked source pixel, in view order
    let mut observed: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let mut per_view = Vec::with_capacity(views.len());
    for (idx, view) in views.iter().enumerate() {
        let cam = view.cam;
        let latent = codec.encode(view.edited)?;
        let coarse = render_latent_map(cloud, cam, stride)?;
        let mut visible = 0;
        for (pix, src) in coarse.source.iter().enumerate() {
            if let Some(s) = src.filter(|s| masked.contains(s)) {
                let (v, u) = (pix / coarse.mask_map.width(), pix % coarse.mask_map.width());
                observed.entry(s).or_default().push(latent.values.pixel(v, u).into());
                visible += 1;
            }
        }

        let fine = render_latent_map(cloud, cam, 1)?;
        let (mut l1, mut n_agree) = (0.0, 0usize);
        if idx != ref_index {
            for (pix, src) in fine.source.iter().enumerate() {
                let Some((su, sv)) = *src else { continue };
                if fine.mask_map.values()[pix] < mask_threshold {
                    continue;
                }
                let (v, u) = (pix / cam.width, pix % cam.width);
                let a = view.edited.pixel(v, u);
                let b = reference.pixel(sv, su);
                l1 += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
                n_agree += 1;
            }
        }

        let excluded = exclusion_mask(&coarse.mask_map, mask_threshold, stride, cam.height, cam.width);
        let (mut se, mut n_keep) = (0.0, 0usize);
        for v in 0..cam.height {
            for u in 0..cam.width {
                if excluded.get(v, u) > 0.0 {
                    continue;
                }
                let a = view.edited.pixel(v, u);
                let b = view.unedited.pixel(v, u);
                se += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                n_keep += 3;
            }
        }
        per_view.push(ViewMetrics {
            view_id: cam.view_id,
            agreement_l1: if n_agree > 0 { l1 / n_agree as f64 } else { 0.0 },
            agreement_pixels: n_agree,
            preservation_psnr: if n_keep > 0 { psnr(se / n_keep as f64) } else { PSNR_CAP_DB },
            preserved_pixels: n_keep / 3,
            visible_masked_points: visible,
        });
    }

    let mut var_sum = 0.0;
    let mut var_points = 0usize;
    for samples in observed.values().filter(|s| s.len() >= 2) {
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        var_sum += cross_sample_variance(&refs);
        var_points += 1;
    }
    let agreeing: Vec<&ViewMetrics> = per_view.iter().filter(|v| v.agreement_pixels > 0).collect();
    let masked_agreement_l1 = if agreeing.is_empty() {
        0.0
    } else {
        agreeing.iter().map(|v| v.agreement_l1).sum::<f64>() / agreeing.len() as f64
    };
    let min_psnr = per_view.iter().map(|v| v.preservation_psnr).fold(PSNR_CAP_DB, f64::min);
    let mean_psnr = per_view.iter().map(|v| v.preservation_psnr).sum::<f64>() / per_view.len().max(1) as f64;
    let report = ConsistencyReport {
        masked_latent_variance: if var_points > 0 { var_sum / var_points as f64 } else { 0.0 },
        variance_points: var_points,
        masked_agreement_l1,
        min_preservation_psnr: min_psnr,
        mean_preservation_psnr: mean_psnr,
        per_view,
    };
    if !report.is_well_formed() {
        return Err(Error::numerical("consistency metrics", 0));
    }
    Ok(report)
}

/// Projected mask at latent resolution, thresholded, grown by one latent
/// pixel and brought back to image resolution.
fn exclusion_mask(coarse: &MaskGrid, threshold: f64, stride: usize, height: usize, width: usize) -> MaskGrid {
    let up = coarse.threshold(threshold).dilate(1).upsample_nearest(stride);
    MaskGrid::from_fn(height, width, |v, u| {
        if v < up.height() && u < up.width() {
            up.get(v, u)
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentState;
    use crate::diffusion::LatentCodec;
    use crate::geometry::{Intrinsics, Pointmap, Pose};
    use crate::grid::{Grid, LatentGrid};
    use crate::latent_field::build_attributed_cloud;
    use alloc::vec;
    use nalgebra::Vector3;

    const W: usize = 8;

    fn intr() -> Intrinsics {
        Intrinsics::new(8.0, 8.0, 3.5, 3.5)
    }

    /// Two cameras looking at a fronto-parallel plane at depth 4; the second
    /// is shifted sideways by a whole number of pixels' worth.
    fn plane_state(shift_px: f64) -> AlignmentState {
        let depth = 4.0;
        let dx = shift_px * depth / 8.0;
        let cam0 = CameraView::new(0, Pose::identity(), intr(), W, W).unwrap();
        let pose1 = Pose::from_axis_angle(Vector3::zeros(), Vector3::new(-dx, 0.0, 0.0));
        let cam1 = CameraView::new(1, pose1, intr(), W, W).unwrap();
        let fused = [&cam0, &cam1]
            .iter()
            .map(|c| {
                let to_world = c.pose.inverse();
                let pts = (0..W)
                    .flat_map(|v| (0..W).map(move |u| (u, v)))
                    .map(|(u, v)| to_world.transform_point(&(intr().ray(u as f64, v as f64) * depth)))
                    .collect();
                Pointmap::new(0, W, W, pts, vec![true; W * W]).unwrap()
            })
            .collect();
        AlignmentState {
            cameras: vec![cam0, cam1],
            fused,
            scales: vec![1.0, 1.0],
        }
    }

    fn ramp() -> Image {
        Grid::from_fn(W, W, 3, |v, u, c| 0.1 + 0.05 * u as f64 + 0.03 * v as f64 + 0.1 * c as f64)
    }

    fn cloud(state: &AlignmentState, mask: &MaskGrid) -> AttributedPointCloud {
        let z = LatentGrid::new(Grid::zeros(W, W, 3), 0, 1);
        build_attributed_cloud(state, &z, mask).unwrap()
    }

    #[test]
    fn identical_static_views_score_zero() {
        let state = plane_state(0.0);
        let img = ramp();
        let cloud = cloud(&state, &MaskGrid::ones(W, W));
        let views: Vec<MetricView> = state
            .cameras
            .iter()
            .map(|cam| MetricView {
                cam,
                edited: &img,
                unedited: &img,
            })
            .collect();
        let r = consistency_metrics(&views, 0, &cloud, &LatentCodec::identity(), 0.5).unwrap();
        assert_eq!(r.masked_latent_variance, 0.0);
        assert_eq!(r.variance_points, W * W);
        assert_eq!(r.masked_agreement_l1, 0.0);
        assert!(r.is_well_formed());
    }

    #[test]
    fn unedited_views_cap_psnr() {
        let state = plane_state(1.0);
        let img = ramp();
        let cloud = cloud(&state, &MaskGrid::zeros(W, W));
        let views: Vec<MetricView> = state
            .cameras
            .iter()
            .map(|cam| MetricView {
                cam,
                edited: &img,
                unedited: &img,
            })
            .collect();
        let r = consistency_metrics(&views, 0, &cloud, &LatentCodec::identity(), 0.5).unwrap();
        assert_eq!(r.min_preservation_psnr, PSNR_CAP_DB);
        assert_eq!(r.mean_preservation_psnr, PSNR_CAP_DB);
        assert!(r.per_view.iter().all(|v| v.preserved_pixels == W * W));
    }

    #[test]
    fn one_pixel_disagreement_by_hand() {
        // one masked pixel in the middle; view 1 sees it one pixel to the left
        let state = plane_state(1.0);
        let mut mask = MaskGrid::zeros(W, W);
        mask.set(3, 4, 1.0);
        let cloud = cloud(&state, &mask);
        let base = ramp();
        let mut other = base.clone();
        // view 1 sees the point at (v 3, u 3); push its colour by +0.2 / -0.4 / 0
        other.pixel_mut(3, 3)[0] = base.pixel(3, 4)[0] + 0.2;
        other.pixel_mut(3, 3)[1] = base.pixel(3, 4)[1] - 0.4;
        other.pixel_mut(3, 3)[2] = base.pixel(3, 4)[2];
        let views = [
            MetricView {
                cam: &state.cameras[0],
                edited: &base,
                unedited: &base,
            },
            MetricView {
                cam: &state.cameras[1],
                edited: &other,
                unedited: &other,
            },
        ];
        let r = consistency_metrics(&views, 0, &cloud, &LatentCodec::identity(), 0.5).unwrap();
        // per channel: (d / 2)^2 -> 0.01, 0.04, 0
        let expected = (0.01 + 0.04 + 0.0) / 3.0;
        assert_eq!(r.variance_points, 1);
        assert!((r.masked_latent_variance - expected).abs() < 1e-12, "{}", r.masked_latent_variance);
        assert_eq!(r.per_view[1].agreement_pixels, 1);
        assert!((r.per_view[1].agreement_l1 - 0.6 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_known_error() {
        assert!((psnr(1e-4) - 40.0).abs() < 1e-9);
        assert_eq!(psnr(0.0), PSNR_CAP_DB);
        assert!((cross_sample_variance(&[&[0.8], &[1.2]]) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn bad_reference_index_is_contract_error() {
        let state = plane_state(0.0);
        let img = ramp();
        let cloud = cloud(&state, &MaskGrid::ones(W, W));
        let views = [MetricView {
            cam: &state.cameras[0],
            edited: &img,
            unedited: &img,
        }];
        assert!(matches!(
            consistency_metrics(&views, 3, &cloud, &LatentCodec::identity(), 0.5),
            Err(Error::Contract(_))
        ));
    }
}

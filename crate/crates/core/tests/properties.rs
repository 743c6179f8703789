use dragscene_core::alignment::{regression_loss, AlignmentState, PairwisePrediction, PredictionSet};
use dragscene_core::diffusion::{ddim_denoise, denoise_one_step, make_schedule, ToyDenoiser};
use dragscene_core::drag::track_point;
use dragscene_core::geometry::{warp_mask, CameraView, Intrinsics, Pointmap, Pose};
use dragscene_core::grid::{Grid, LatentGrid, MaskGrid};
use dragscene_core::latent_field::{render_latent_map, AttributedPointCloud, RenderedMaps};
use dragscene_core::mvopt::{optimize_view_latent, MVOptConfig};
use dragscene_core::rng::SeededRng;
use nalgebra::Vector3;
use proptest::prelude::*;

fn denoiser(k: u8) -> ToyDenoiser {
    match k % 3 {
        0 => ToyDenoiser::Zero,
        1 => ToyDenoiser::Linear { a: ToyDenoiser::DEFAULT_LINEAR_A },
        _ => ToyDenoiser::Smoothing,
    }
}

fn grid(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> Grid {
    Grid::from_fn(h, w, c, |_, _, _| rng.normal())
}

fn pose(rng: &mut SeededRng, angle: f64, shift: f64) -> Pose {
    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
    let t = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * shift;
    Pose::from_axis_angle(axis * angle, t)
}

fn cam(id: usize, pose: Pose, w: usize, h: usize) -> CameraView {
    CameraView::new(id, pose, Intrinsics::new(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0), w, h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lift_then_project_recovers_pixel(
        seed in any::<u64>(), u in -5.0f64..40.0, v in -5.0f64..30.0, depth in 0.01f64..50.0, f in 5.0f64..80.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let c = CameraView::new(0, pose(&mut rng, 1.0, 2.0), Intrinsics::new(f, 1.3 * f, 17.0, 11.0), 36, 24).unwrap();
        let p = c.lift(u, v, depth);
        let proj = c.project_world(&p);
        prop_assert!((proj.u - u).abs() < 1e-6 && (proj.v - v).abs() < 1e-6, "{:?}", proj);
        prop_assert!((proj.depth - depth).abs() < 1e-9 * depth.max(1.0));
    }

    #[test]
    fn warped_masks_stay_in_unit_range(seed in any::<u64>(), angle in 0.0f64..0.5) {
        let mut rng = SeededRng::new(seed);
        let (w, h) = (12, 10);
        let reference = cam(0, Pose::identity(), w, h);
        let dst = cam(1, pose(&mut rng, angle, 0.2), w, h);
        let points = (0..w * h)
            .map(|i| reference.lift((i % w) as f64, (i / w) as f64, rng.uniform_range(2.0, 4.0)))
            .collect();
        let pm = Pointmap::new(0, w, h, points, (0..w * h).map(|_| rng.uniform() < 0.9).collect()).unwrap();
        let mask = MaskGrid::from_fn(h, w, |_, _| if rng.uniform() < 0.4 { 1.0 } else { 0.0 });
        let out = warp_mask(&mask, &pm, &reference, &dst).unwrap();
        prop_assert!(out.values().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rendering_ignores_point_order(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = SeededRng::new(seed);
        let c = cam(0, Pose::identity(), 16, 12);
        let positions: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                // quantized depths force exact ties
                let z = 2.0 + (rng.uniform() * 4.0).floor() * 0.5;
                c.lift(rng.uniform_range(-1.0, 16.0), rng.uniform_range(-1.0, 12.0), z)
            })
            .collect();
        let latents = (0..n * 3).map(|_| rng.normal()).collect();
        let weights = (0..n).map(|_| rng.uniform()).collect();
        let source = (0..n).map(|i| (i % 16, i / 16)).collect();
        let cloud = AttributedPointCloud::new(positions, latents, 3, weights, source, 16, 5, 2).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, (rng.uniform() * (i + 1) as f64) as usize);
        }
        let a = render_latent_map(&cloud, &c, 2).unwrap();
        let b = render_latent_map(&cloud.permuted(&perm).unwrap(), &c, 2).unwrap();
        prop_assert_eq!(&a, &b);
        for (k, &m) in a.mask_map.values().iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(a.coverage[k] || m == 0.0);
        }
    }

    #[test]
    fn regression_loss_is_non_negative(seed in any::<u64>(), k in 2usize..4) {
        let mut rng = SeededRng::new(seed);
        let (w, h) = (3, 3);
        let cameras: Vec<CameraView> =
            (0..k).map(|a| cam(a, if a == 0 { Pose::identity() } else { pose(&mut rng, 0.3, 0.3) }, w, h)).collect();
        let pm = |rng: &mut SeededRng, frame| {
            let pts = (0..w * h).map(|_| Vector3::new(rng.normal(), rng.normal(), rng.normal())).collect();
            Pointmap::new(frame, w, h, pts, vec![true; w * h]).unwrap()
        };
        let fused = (0..k).map(|_| pm(&mut rng, 0)).collect();
        let mut preds = Vec::new();
        for t in 0..k {
            for s in 0..k {
                preds.push(PairwisePrediction::with_unit_confidence(s, t, pm(&mut rng, t)).unwrap());
            }
        }
        let preds = PredictionSet::from_predictions((0..k).collect(), preds).unwrap();
        let masks: Vec<MaskGrid> = (0..k).map(|_| MaskGrid::from_fn(h, w, |_, _| rng.uniform())).collect();
        let state = AlignmentState { cameras, fused, scales: vec![1.0; k] };
        prop_assert!(regression_loss(&state, &preds, &masks).unwrap() >= 0.0);
    }

    #[test]
    fn schedules_are_monotone_and_bounded(t_total in 1usize..200, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = make_schedule(t_total, lo, (lo + span).min(0.999)).unwrap();
        let ab = s.alpha_bar();
        prop_assert_eq!(ab.len(), t_total);
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_steps_compose_to_a_full_denoise(seed in any::<u64>(), den in 0u8..3, from in 1usize..50, back in 0usize..50) {
        let mut rng = SeededRng::new(seed);
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let den = denoiser(den);
        let to = from.saturating_sub(back);
        let z = LatentGrid::new(grid(&mut rng, 6, 5, 4), from, 1);
        let mut step = z.clone();
        for _ in to..from {
            step = denoise_one_step(&step, &den, &sched).unwrap();
        }
        let full = ddim_denoise(&z, &den, &sched, from, to).unwrap();
        prop_assert_eq!(step.timestep, to);
        prop_assert!(step.values.max_abs_diff(&full.values) < 1e-9);
    }

    #[test]
    fn tracking_moves_at_most_r_track(seed in any::<u64>(), r in 0usize..4, x in -2.0f64..12.0, y in -2.0f64..10.0) {
        let mut rng = SeededRng::new(seed);
        let f = grid(&mut rng, 9, 11, 3);
        let reference = [rng.normal(), rng.normal(), rng.normal()];
        let (x, y) = (x.clamp(0.0, 10.0), y.clamp(0.0, 8.0));
        let ((nx, ny), _) = track_point(&f, (x, y), &reference, r);
        prop_assert!((nx - x).abs() <= r as f64 + 1e-12 && (ny - y).abs() <= r as f64 + 1e-12);
    }

    #[test]
    fn optimization_never_ends_above_its_start(seed in any::<u64>(), den in 0u8..3, sigma in 0.001f64..0.1) {
        let mut rng = SeededRng::new(seed);
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let den = denoiser(den);
        let t = sched.t_r();
        let (h, w, c) = (6, 6, 4);
        let z_init = LatentGrid::new(grid(&mut rng, h, w, c), t, 2);
        let maps = RenderedMaps {
            latent_map: LatentGrid::new(grid(&mut rng, h, w, c), t, 2),
            mask_map: MaskGrid::from_fn(h, w, |v, u| if (1..4).contains(&u) && (2..5).contains(&v) { 1.0 } else { 0.0 }),
            coverage: (0..h * w).map(|_| rng.uniform() < 0.8).collect(),
            source: vec![None; h * w],
        };
        let cfg = MVOptConfig { sigma, ..MVOptConfig::default() };
        let (z, trace) = optimize_view_latent(&z_init, &maps, &den, &sched, &cfg).unwrap();
        prop_assert_eq!(trace.len(), cfg.m_iters);
        prop_assert!(trace.iter().all(|r| r.rec >= 0.0 && r.mask >= 0.0));
        let obj = dragscene_core::mvopt::ViewObjective::new(&z_init, &maps, &den, &sched, &cfg).unwrap();
        let last = obj.losses(&z.values).unwrap().total;
        prop_assert!(last <= trace[0].total, "{} > {}", last, trace[0].total);
    }
}

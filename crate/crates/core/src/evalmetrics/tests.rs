use super::*;
use crate::dualquat::Quat;
use crate::model::{ModelConfig, Model};
use crate::scenegen::{generate_scene, oracle_gaussians, sample_training_clip, SceneConfig, ORACLE_FOOTPRINT};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pose(axis: [f64; 3], angle: f64, t: [f64; 3]) -> UnitDualQuat {
    UnitDualQuat::from_rotation_translation(
        Quat::from_axis_angle(Vector3::from(axis).normalize(), angle),
        Vector3::from(t),
    )
}

fn random_pose(rng: &mut impl Rng, scale: f64) -> UnitDualQuat {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0];
    let t = std::array::from_fn(|_| scale * rng.random_range(-1.0..1.0));
    pose(axis, rng.random_range(-0.5..0.5), t)
}

fn random_trajectory(rng: &mut impl Rng, n: usize) -> Vec<UnitDualQuat> {
    let mut v = vec![UnitDualQuat::IDENTITY];
    v.extend((1..n).map(|_| random_pose(rng, 1.0)));
    v
}

#[test]
fn psnr_closed_forms() {
    let a = vec![0.4; 30];
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&a, &b[..27]).is_err());
}

#[test]
fn psnr_falls_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base: Vec<f64> = (0..3 * 256).map(|_| rng.random_range(0.2..0.8)).collect();
    let unit: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for sigma in [0.001, 0.01, 0.03, 0.1, 0.2] {
        let noisy: Vec<f64> = base.iter().zip(&unit).map(|(b, n)| b + sigma * n).collect();
        let p = psnr(&noisy, &base).unwrap();
        assert!(p < last);
        last = p;
    }
}

/// Direct 2D-window SSIM for a single channel.
fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let n = 11;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let mut total = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..n {
                for dx in 0..n {
                    let wt = g[dy] * g[dx] / (gs * gs);
                    let (p, q) = (a[(y0 + dy) * w + x0 + dx], b[(y0 + dy) * w + x0 + dx]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, c) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let (c1, c2) = (1e-4, 9e-4);
            total += (2.0 * mx * my + c1) * (2.0 * c + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn ssim_matches_direct_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (w, h) = (17, 13);
    let a: Vec<f64> = (0..3 * w * h).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = a.iter().map(|v| (v + 0.2 * rng.random_range(-1.0..1.0f64)).clamp(0.0, 1.0)).collect();
    let want: f64 = (0..3)
        .map(|c| {
            let pa: Vec<f64> = a.iter().skip(c).step_by(3).copied().collect();
            let pb: Vec<f64> = b.iter().skip(c).step_by(3).copied().collect();
            ssim_oracle(&pa, &pb, w, h)
        })
        .sum::<f64>()
        / 3.0;
    assert!((ssim(&a, &b, w, h).unwrap() - want).abs() < 1e-12);
    assert!((ssim(&a, &a, w, h).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&a, &b, w + 1, h).is_err());
}

#[test]
fn normalization() {
    let gt = vec![
        UnitDualQuat::IDENTITY,
        pose([0.0, 1.0, 0.0], 0.2, [0.5, 0.0, 1.0]),
        pose([0.0, 1.0, 0.0], 0.3, [0.0, 0.0, 2.0]),
    ];
    let n = normalize_trajectory(&gt).unwrap();
    for (a, b) in n.iter().zip(&gt) {
        assert!((a.translation() - b.translation() / 2.0).norm() < 1e-12);
        assert!(a.rotation().dot(b.rotation()).abs() > 1.0 - 1e-12);
    }
    let again = normalize_trajectory(n.as_slice()).unwrap();
    for (a, b) in again.iter().zip(n.iter()) {
        assert!(a.max_diff(*b) < 1e-12);
    }
    assert!(matches!(
        normalize_trajectory(&[UnitDualQuat::IDENTITY; 3]),
        Err(EvalError::Degenerate(_))
    ));
    // Non-canonical input is re-expressed relative to its first pose.
    let shift = pose([1.0, 0.0, 0.0], 0.4, [3.0, -1.0, 0.5]);
    let moved: Vec<UnitDualQuat> = gt.iter().map(|p| shift.mul(*p)).collect();
    let m = normalize_trajectory(&moved).unwrap();
    for (a, b) in m.iter().zip(n.iter()) {
        assert!(a.max_diff(*b) < 1e-9);
    }
}

#[test]
fn ate_and_rpe_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_trajectory(&mut rng, 5);
    assert_eq!(ate(&gt, &gt).unwrap(), 0.0);
    let (t, r) = rpe(&gt, &gt).unwrap();
    assert!(t < 1e-12 && r < 1e-5);

    let v = Vector3::new(0.3, -0.4, 0.0);
    let shifted: Vec<UnitDualQuat> = gt
        .iter()
        .map(|p| UnitDualQuat::from_rotation_translation(p.rotation(), p.translation() + v))
        .collect();
    assert!((ate(&shifted, &gt).unwrap() - 0.5).abs() < 1e-12);
    assert!(ate(&shifted[..4], &gt).is_err());

    // A pure rotation of 10 degrees about the camera center on the last
    // frame costs exactly 10 degrees on the final pair.
    let mut bent = gt.clone();
    let last = bent[4];
    bent[4] = UnitDualQuat::from_rotation_translation(
        last.rotation().mul(Quat::from_axis_angle(Vector3::z(), 10f64.to_radians())),
        last.translation(),
    );
    let terms = rpe_terms(&bent, &gt).unwrap();
    assert!((terms[3].1 - 10.0).abs() < 1e-6);
    assert!(terms[3].0 < 1e-12);
}

#[test]
fn rpe_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let gt = random_trajectory(&mut rng, 6);
        let k = rng.random_range(1..5);
        let mut pred = gt.clone();
        pred[k] = random_pose(&mut rng, 0.3).mul(pred[k]);
        let terms = rpe_terms(&pred, &gt).unwrap();
        for (i, t) in terms.iter().enumerate() {
            let touched = i + 1 == k || i == k;
            assert_eq!(t.0 > 1e-9 || t.1 > 1e-4, touched, "pair {i}, moved {k}");
        }
    }
}

#[test]
fn similarity_fit_recovers_global_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = normalize_trajectory(&random_trajectory(&mut rng, 6)).unwrap();
    let fit = SimilarityFit {
        scale: 2.5,
        rotation: *Rotation3::new(Vector3::new(0.3, -0.5, 0.2)).matrix(),
        translation: Vector3::new(1.0, 2.0, -0.5),
        degenerate: false,
    };
    let pred = fit.apply(gt.as_slice());
    assert!(ate(&pred, gt.as_slice()).unwrap() > 0.5);
    let back = similarity_fit(&pred, gt.as_slice()).unwrap();
    assert!(!back.degenerate);
    let aligned = back.apply(&pred);
    assert!(ate(&aligned, gt.as_slice()).unwrap() < 1e-6);
    assert!((back.scale - 0.4).abs() < 1e-9);
    let (t, r) = rpe(&aligned, gt.as_slice()).unwrap();
    assert!(t < 1e-6 && r < 1e-4);
}

#[test]
fn two_frame_fit_is_flagged() {
    let gt = [UnitDualQuat::IDENTITY, pose([0.0, 1.0, 0.0], 0.1, [1.0, 0.0, 0.0])];
    let pred = [UnitDualQuat::IDENTITY, pose([0.0, 1.0, 0.0], 0.1, [0.0, 0.0, 3.0])];
    let fit = similarity_fit(&pred, &gt).unwrap();
    assert!(fit.degenerate);
    assert_eq!(fit.rotation, Matrix3::identity());
    let r = pose_metrics(&pred, &gt, true).unwrap();
    assert!(r.aligned && r.degenerate_fit);
    // Collinear centers are flagged too.
    let line: Vec<UnitDualQuat> = (0..4).map(|i| pose([0.0, 0.0, 1.0], 0.0, [i as f64, 0.0, 0.0])).collect();
    assert!(similarity_fit(&line, &line).unwrap().degenerate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_never_increases_ate(seed in 0u64..10_000, n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_trajectory(&mut rng, n);
        let pred: Vec<UnitDualQuat> = gt.iter().map(|p| random_pose(&mut rng, 0.4).mul(*p)).collect();
        let pred = {
            let mut p = pred;
            p[n - 1] = pose([0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0]).mul(p[n - 1]);
            p
        };
        let (Ok(raw), Ok(al)) = (pose_metrics(&pred, &gt, false), pose_metrics(&pred, &gt, true)) else {
            return Ok(());
        };
        prop_assert!(al.ate <= raw.ate + 1e-12);
        prop_assert!(raw.ate >= 0.0 && raw.rpe_trans >= 0.0 && raw.rpe_rot >= 0.0);
    }

    #[test]
    fn metrics_are_invariant_to_renormalization(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_trajectory(&mut rng, 5);
        let pred = random_trajectory(&mut rng, 5);
        let (Ok(a), Ok(b)) = (normalize_trajectory(&pred), normalize_trajectory(&gt)) else {
            return Ok(());
        };
        let once = pose_metrics(a.as_slice(), b.as_slice(), false).unwrap();
        let direct = pose_metrics(&pred, &gt, false).unwrap();
        prop_assert!((once.ate - direct.ate).abs() < 1e-9);
        prop_assert!((once.rpe_trans - direct.rpe_trans).abs() < 1e-9);
        prop_assert!((once.rpe_rot - direct.rpe_rot).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..3 * 16 * 12).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..a.len()).map(|_| rng.random::<f64>()).collect();
        let (x, y) = (ssim(&a, &b, 16, 12).unwrap(), ssim(&b, &a, 16, 12).unwrap());
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&x));
    }
}

fn scene_clip() -> crate::scenegen::SceneSample {
    let cfg = SceneConfig::default();
    let scene = generate_scene(11, &cfg).unwrap();
    sample_training_clip(&scene, 3, 2, 0)
}

#[test]
fn photometric_alignment_descends() {
    let clip = scene_clip();
    let gs = oracle_gaussians(&clip, ORACLE_FOOTPRINT, true);
    let render_cfg = RenderConfig {
        background: clip.config.background,
        ..RenderConfig::default()
    };
    let t = &clip.targets[0];
    let nudge = pose([0.3, 1.0, 0.2], 0.03, [0.04, -0.03, 0.02]);
    let init = t.pose.mul(nudge);
    let res = photometric_align(&gs, &t.image, &clip.intrinsics, &init, &render_cfg, &PhotoAlignConfig::default());
    assert!(res.history.len() > 5);
    for w in res.history.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(res.history.last().unwrap() < &(0.5 * res.history[0]), "{:?}", res.history);
    assert!(res.pose.max_diff(t.pose) < init.max_diff(t.pose));
}

#[test]
fn scene_evaluation_report() {
    let clip = scene_clip();
    let cfg = ModelConfig::default();
    let mut store = crate::numerics::ParamStore::new();
    let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let opts = EvalOptions {
        render: RenderConfig {
            background: clip.config.background,
            ..RenderConfig::default()
        },
        ..EvalOptions::default()
    };
    let row = evaluate_scene(&model, &store, &clip, &opts).unwrap();
    assert_eq!(row.views, 3);
    assert_eq!(row.target.views, clip.targets.len());
    assert!(row.target.psnr > 5.0 && row.target.psnr < PSNR_CAP);
    assert!(row.target.lpips.is_none());
    let again = evaluate_scene(&model, &store, &clip, &opts).unwrap();
    assert_eq!(row, again);

    let report = EvalReport::new("abc".into(), 3, AlignMode::None, vec![row.clone(), again]);
    assert_eq!(report.mean.target_psnr, row.target.psnr);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["config_digest", "views", "align", "aggregation", "rows", "mean"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["align"], "none");
}

/// Pairwise definition of AUC.
fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut win, mut total) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                total += 1.0;
                win += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    win / total
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(seed in 0u64..10_000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) * 0.5).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - auc_pairs(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(auc(&[0.1, 0.9], &[false, true]), Some(1.0));
    assert_eq!(auc(&[0.9, 0.1], &[false, true]), Some(0.0));
    assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
    assert_eq!(auc(&[0.5, 0.7], &[true, true]), None);
}

#[test]
fn distill_metrics_on_ground_truth() {
    let clip = scene_clip();
    let m = distill_metrics(&clip.pointmaps, &clip.confidence, &clip);
    assert_eq!(m.point_error, 0.0);
    assert_eq!(m.confidence_auc, Some(1.0));
    let shifted = Tensor::from_fn(clip.pointmaps.shape().to_vec(), |i| clip.pointmaps.data()[i] + if i % 3 == 2 { 0.1 } else { 0.0 });
    let m = distill_metrics(&shifted, &clip.confidence, &clip);
    assert!((m.point_error - 0.1).abs() < 1e-12);
    assert!((m.point_error_frac - 0.1 / clip.extent()).abs() < 1e-12);
}

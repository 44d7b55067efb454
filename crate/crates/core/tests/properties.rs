//! Randomized invariants of the public API.

use nalgebra::Vector3;
use posesplat::dualquat::{dq_align_loss, PoseSet, Quat, UnitDualQuat, UNIT_TOL};
use posesplat::gsplat::{composite_weights, render, CameraModel, Gaussian, GaussianSet, Intrinsics, RenderConfig};
use posesplat::numerics::{ExecMode, Tape, Tensor};
use posesplat::scenegen::{generate_scene, SceneConfig};
use proptest::prelude::*;

fn axis() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate axis", |(x, y, z)| x * x + y * y + z * z > 1e-4)
        .prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn udq() -> impl Strategy<Value = UnitDualQuat> {
    (axis(), -3.1..3.1f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)
        .prop_map(|(a, ang, x, y, z)| UnitDualQuat::from_rotation_translation(Quat::from_axis_angle(a, ang), Vector3::new(x, y, z)))
}

fn unit_error(p: UnitDualQuat) -> f64 {
    let (r, d) = (p.real(), p.dual());
    (r.norm() - 1.0).abs().max(r.dot(d).abs())
}

fn negated(p: UnitDualQuat) -> UnitDualQuat {
    UnitDualQuat::from_array(p.to_array().map(|v| -v)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dq_products_stay_unit(a in udq(), b in udq(), c in udq()) {
        prop_assert!(unit_error(a.mul(b).mul(c)) < UNIT_TOL);
    }

    #[test]
    fn dq_times_conjugate_is_identity(p in udq()) {
        prop_assert!(p.mul(p.conjugate()).max_diff(UnitDualQuat::IDENTITY) < 1e-6);
    }

    #[test]
    fn dq_se3_round_trip(p in udq()) {
        let se3 = p.to_se3();
        let back = UnitDualQuat::from_se3(&se3).to_se3();
        prop_assert!((se3.rotation - back.rotation).abs().max() < 1e-9);
        prop_assert!((se3.translation - back.translation).norm() < 1e-9);
    }

    #[test]
    fn dq_action_matches_se3(p in udq(), x in -5.0..5.0f64, y in -5.0..5.0f64, z in -5.0..5.0f64) {
        let v = Vector3::new(x, y, z);
        prop_assert!((p.transform_point(v) - p.to_se3().apply(v)).norm() < 1e-9);
    }

    #[test]
    fn dq_canonicalization_is_idempotent_and_pose_preserving(p in udq()) {
        let c = p.canonical();
        prop_assert_eq!(c.canonical(), c);
        prop_assert_eq!(negated(p).canonical(), c);
        let (a, b) = (p.to_se3(), negated(p).to_se3());
        prop_assert!((a.rotation - b.rotation).abs().max() < 1e-12);
        prop_assert!((a.translation - b.translation).norm() < 1e-12);
    }

    #[test]
    fn dq_align_loss_is_zero_at_truth_and_nonnegative(ps in prop::collection::vec(udq(), 2..6), qs in prop::collection::vec(udq(), 6)) {
        let gt = PoseSet::canonicalize(&ps);
        prop_assert!(dq_align_loss(&gt, &gt).unwrap().abs() < 1e-12);
        let pred = PoseSet::canonicalize(&qs[..ps.len()]);
        prop_assert!(dq_align_loss(&pred, &gt).unwrap() >= 0.0);
        // Flipping the sign of any stored pose changes nothing.
        let mut flipped: Vec<_> = gt.as_slice().to_vec();
        let last = flipped.len() - 1;
        flipped[last] = negated(flipped[last]);
        let flipped = PoseSet::canonicalize(&flipped);
        prop_assert!(dq_align_loss(&flipped, &gt).unwrap().abs() < 1e-12);
    }
}

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (
        (-1.0..1.0f64, -1.0..1.0f64, 2.0..5.0f64),
        0.05..0.95f64,
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_filter("rotation", |q| q.0.abs() + q.1.abs() + q.2.abs() + q.3.abs() > 0.1),
        (0.02..0.3f64, 0.02..0.3f64, 0.02..0.3f64),
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64),
    )
        .prop_map(|(c, o, q, s, col)| {
            let q = Quat::new(q.0, q.1, q.2, q.3);
            let q = q.scale(1.0 / q.norm());
            Gaussian {
                center: [c.0, c.1, c.2],
                opacity: o,
                rotation: q.to_array(),
                scale: [s.0, s.1, s.2],
                color: vec![col.0, col.1, col.2],
            }
        })
}

fn splats(n: std::ops::Range<usize>) -> impl Strategy<Value = GaussianSet> {
    prop::collection::vec(gaussian(), n).prop_map(|gs| {
        let mut set = GaussianSet::new(0);
        for g in gs {
            set.push(g);
        }
        set
    })
}

fn camera() -> CameraModel {
    CameraModel::from_pose(Intrinsics::centered(20.0, 16, 12), &UnitDualQuat::IDENTITY)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compositing_weights_are_a_partition_of_alpha(gs in splats(1..40)) {
        let cfg = RenderConfig::default();
        let w = composite_weights(&gs, &camera(), &cfg);
        let out = render(&gs, &camera(), &cfg);
        for (px, ws) in w.iter().enumerate() {
            let sum: f64 = ws.iter().map(|(_, v)| v).sum();
            prop_assert!(ws.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
            prop_assert!(sum <= 1.0 + 1e-12);
            prop_assert!((sum - out.alpha[px]).abs() < 1e-12);
        }
    }

    #[test]
    fn transparent_gaussians_change_nothing(gs in splats(1..30), extra in splats(1..10)) {
        let cfg = RenderConfig::default();
        let base = render(&gs, &camera(), &cfg);
        let mut with = gs.clone();
        for mut g in extra.gaussians {
            g.opacity = 0.0;
            with.push(g);
        }
        prop_assert_eq!(render(&with, &camera(), &cfg), base);
    }

    #[test]
    fn rendering_is_rigidly_equivariant(gs in splats(1..30), m in udq()) {
        let cfg = RenderConfig::default();
        let k = Intrinsics::centered(20.0, 16, 12);
        let a = render(&gs, &CameraModel::from_pose(k, &UnitDualQuat::IDENTITY), &cfg);
        let b = render(&gs.transformed(&m), &CameraModel::from_pose(k, &m), &cfg);
        for (x, y) in a.rgb.iter().zip(&b.rgb).chain(a.alpha.iter().zip(&b.alpha)) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_upstream_gradient_gives_zero_leaf_gradients(xs in prop::collection::vec(-2.0..2.0f64, 12)) {
        let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
        let a = tape.leaf(Tensor::new([3, 4], xs.clone()));
        let b = tape.leaf(Tensor::new([4, 3], xs));
        let y = a.matmul(b).gelu().softmax_rows().layer_norm(1e-5);
        let g = tape.backward_with_seed(y, &[0.0; 9]).unwrap();
        prop_assert!(g.wrt(a).unwrap_or(&[]).iter().all(|&v| v == 0.0));
        prop_assert!(g.wrt(b).unwrap_or(&[]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scene_generation_is_a_pure_function_of_seed(seed in 0u64..1000) {
        let cfg = SceneConfig {
            width: 16,
            height: 16,
            focal: 16.0,
            trajectory_len: 4,
            supersample: 1,
            ..SceneConfig::default()
        };
        prop_assert_eq!(generate_scene(seed, &cfg).unwrap(), generate_scene(seed, &cfg).unwrap());
    }
}

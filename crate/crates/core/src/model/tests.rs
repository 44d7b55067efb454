use super::*;
use crate::numerics::gradcheck::{DEFAULT_EPS, DEFAULT_TOL};
use crate::numerics::GradCase;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config(h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        height: h,
        width: w,
        patch: 4,
        dim: 16,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 2,
        ffn_mult: 2,
        max_views: 4,
        default_focal: h as f64,
        ..ModelConfig::default()
    }
}

fn random_frames(rng: &mut impl Rng, t: usize, h: usize, w: usize, intrinsics: bool) -> FrameSequence {
    FrameSequence {
        width: w,
        height: h,
        images: (0..t).map(|_| (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).collect(),
        intrinsics: intrinsics.then(|| {
            (0..t)
                .map(|i| Intrinsics::centered(h as f64 * (1.0 + 0.1 * i as f64), w, h))
                .collect()
        }),
        indices: (0..t).collect(),
    }
}

fn build(cfg: ModelConfig, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let m = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (m, store)
}

/// Randomizes every parameter so zero-initialized heads do not hide wiring.
fn perturb(store: &mut ParamStore, rng: &mut impl Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += std * (rng.random::<f64>() - 0.5);
        }
    }
}

fn encode(m: &Model, store: &ParamStore, f: &FrameSequence) -> Tensor {
    let tape = Tape::new();
    let p = Binder::frozen(&tape, store);
    m.encode(&p, f).to_tensor()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig { width: 30, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { sh_degree: 2, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn encoder_shape_and_frame_independence() {
    let cfg = ModelConfig::default();
    let (m, store) = build(cfg.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut f = random_frames(&mut rng, 4, 32, 32, false);
    let tok = encode(&m, &store, &f);
    assert_eq!(tok.shape(), &[4 * 16, cfg.dim]);

    f.images[2] = f.images[0].clone();
    let tok = encode(&m, &store, &f);
    let l = 16 * cfg.dim;
    assert_eq!(&tok.data()[..l], &tok.data()[2 * l..3 * l]);

    // Changing frame 3 leaves the other frames' tokens untouched.
    let mut g = f.clone();
    g.images[3][7] = 1.0 - g.images[3][7];
    let tok2 = encode(&m, &store, &g);
    assert_eq!(&tok.data()[..3 * l], &tok2.data()[..3 * l]);
    assert_ne!(&tok.data()[3 * l..], &tok2.data()[3 * l..]);
}

#[test]
fn intrinsics_change_tokens_only_when_enabled_and_present() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_frames(&mut rng, 2, 16, 16, true);
    let mut bare = f.clone();
    bare.intrinsics = None;

    let (m, store) = build(toy_config(16, 16), 4);
    assert_ne!(encode(&m, &store, &f), encode(&m, &store, &bare));

    let mut cfg = toy_config(16, 16);
    cfg.flags.intrinsics = false;
    let (m, store) = build(cfg, 4);
    assert_eq!(encode(&m, &store, &f), encode(&m, &store, &bare));
}

#[test]
fn depth_zero_decoder_passes_camera_embeddings_through() {
    let cfg = ModelConfig {
        decoder_depth: 0,
        ..toy_config(16, 16)
    };
    let (m, store) = build(cfg, 5);
    let tape = Tape::new();
    let p = Binder::frozen(&tape, &store);
    let vis = p.constant(Tensor::zeros(vec![3 * 16, 16]));
    let out = m.decode(&p, vis, 3);
    let cam = out.camera.to_tensor();
    let tok = store.value(m.camera_token);
    let pos = store.value(m.camera_pos);
    for t in 0..3 {
        for c in 0..16 {
            assert_eq!(cam.row(t)[c], tok.data()[c] + pos.row(t)[c]);
        }
    }
}

#[test]
fn frame_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, mut store) = build(toy_config(16, 16), 7);
    perturb(&mut store, &mut rng, 0.2);
    let f = random_frames(&mut rng, 3, 16, 16, false);
    let mut g = f.clone();
    g.images.swap(1, 2);
    let a = m.predict(&store, &f, Phase::Nvs).unwrap();
    let b = m.predict(&store, &g, Phase::Nvs).unwrap();
    assert!(a.poses.get(1).max_diff(b.poses.get(2)) > 1e-9);
}

#[test]
fn outputs_are_pixel_aligned_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, mut store) = build(toy_config(16, 16), 9);
    perturb(&mut store, &mut rng, 0.5);
    for t in 1..=4 {
        let f = random_frames(&mut rng, t, 16, 16, t % 2 == 0);
        let out = m.predict(&store, &f, Phase::Nvs).unwrap();
        assert_eq!(out.gaussians.len(), t * 256);
        assert_eq!(out.gaussians.provenance.len(), t * 256);
        assert_eq!(out.gaussians.provenance[256 * (t - 1) + 17], Provenance { frame: t as u32 - 1, pixel: 17 });
        assert_eq!(out.poses.len(), t);
        assert_eq!(out.poses.get(0), UnitDualQuat::IDENTITY);
        assert!(out.gaussians.gaussians.iter().all(Gaussian::is_valid));
        assert!(out.pointmap.is_none() && out.confidence.is_none());
    }
}

#[test]
fn phase_gates_distillation_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (m, mut store) = build(toy_config(16, 16), 11);
    perturb(&mut store, &mut rng, 1.0);
    let f = random_frames(&mut rng, 2, 16, 16, false);
    let out = m.predict(&store, &f, Phase::Distill).unwrap();
    let pm = out.pointmap.unwrap();
    let conf = out.confidence.unwrap();
    assert_eq!(pm.shape(), &[2 * 256, 3]);
    assert_eq!(conf.shape(), &[2 * 256, 1]);
    assert!(conf.data().iter().all(|&c| c > 0.0));
}

#[test]
fn fresh_model_starts_from_priors() {
    let cfg = toy_config(16, 16);
    let (m, store) = build(cfg.clone(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = random_frames(&mut rng, 2, 16, 16, false);
    let out = m.predict(&store, &f, Phase::Nvs).unwrap();
    let k = Intrinsics::centered(cfg.default_focal, 16, 16);
    // Zero-initialized color head reproduces the input pixels.
    for (i, g) in out.gaussians.gaussians.iter().enumerate() {
        let (t, px) = (i / 256, i % 256);
        for ch in 0..3 {
            let want = f.images[t][3 * px + ch].clamp(0.01, 0.99);
            assert!((g.color[ch] - want).abs() < 1e-12);
        }
        // Centers stay close to the depth prior along the pixel ray.
        let ray = k.ray(px % 16, px / 16) * cfg.depth_prior;
        let d = (nalgebra::Vector3::from(g.center) - ray).norm();
        assert!(d < 0.5, "center {i} off by {d}");
    }
    // The camera head starts near the identity.
    assert!(out.poses.get(1).max_diff(UnitDualQuat::IDENTITY) < 0.3);
}

#[test]
fn quaternion_translation_head() {
    let mut cfg = toy_config(16, 16);
    cfg.flags.dq_param = false;
    let (m, mut store) = build(cfg, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    perturb(&mut store, &mut rng, 0.5);
    assert_eq!(store.value(m.heads.camera.w).shape(), &[16, QUAT_TRANS_WIDTH]);
    let f = random_frames(&mut rng, 3, 16, 16, false);
    let out = m.predict(&store, &f, Phase::Nvs).unwrap();
    assert_eq!(out.poses.len(), 3);
}

#[test]
fn sh1_colors_keep_base_residual() {
    let cfg = ModelConfig {
        sh_degree: 1,
        ..toy_config(16, 16)
    };
    let (m, store) = build(cfg, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = random_frames(&mut rng, 1, 16, 16, false);
    let out = m.predict(&store, &f, Phase::Nvs).unwrap();
    let g = &out.gaussians.gaussians[5];
    assert_eq!(g.color.len(), 12);
    for ch in 0..3 {
        assert!((g.color[4 * ch] - f.images[0][15 + ch].clamp(0.01, 0.99)).abs() < 1e-12);
        assert_eq!(&g.color[4 * ch + 1..4 * ch + 4], &[0.0; 3]);
    }
}

#[test]
fn input_errors() {
    let (m, store) = build(toy_config(16, 16), 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let f = random_frames(&mut rng, 5, 16, 16, false);
    assert!(matches!(m.predict(&store, &f, Phase::Nvs), Err(ModelError::Input(_))));
    let f = random_frames(&mut rng, 2, 32, 32, false);
    assert!(matches!(m.predict(&store, &f, Phase::Nvs), Err(ModelError::Input(_))));
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = toy_config(16, 16);
    let (m, mut store) = build(cfg.clone(), 21);
    perturb(&mut store, &mut rng, 0.3);
    let mut ck = Checkpoint::from_store(cfg, Phase::Distill, 21, &store);
    ck.header.extra = serde_json::json!({"step": 5});
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.header.phase, Phase::Distill);
    assert_eq!(back.header.extra["step"], 5);
    let (m2, store2) = Model::from_checkpoint(&back).unwrap();
    let f = random_frames(&mut rng, 2, 16, 16, false);
    assert_eq!(
        m.predict(&store, &f, Phase::Nvs).unwrap(),
        m2.predict(&store2, &f, Phase::Nvs).unwrap()
    );

    let mut bytes = ck.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Magic)));
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());

    // A checkpoint of a different shape is rejected by name.
    let other = ModelConfig { dim: 8, heads: 2, ..toy_config(16, 16) };
    let (_, small) = build(other.clone(), 0);
    let ck = Checkpoint::from_store(other, Phase::Nvs, 0, &small);
    assert!(matches!(
        m.load_params(&mut store, &ck),
        Err(ModelError::Checkpoint(CheckpointError::Shape { .. }))
    ));
}

/// Full-model gradient check: every parameter is an input.
fn model_case(name: &'static str, phase: Phase, t: usize) -> GradCase {
    let cfg = ModelConfig {
        height: 8,
        width: 8,
        patch: 4,
        dim: 8,
        heads: 2,
        ffn_mult: 1,
        max_views: 3,
        default_focal: 8.0,
        ..ModelConfig::default()
    };
    let (model, base) = build(cfg, 30);
    let frames = random_frames(&mut ChaCha8Rng::seed_from_u64(31), t, 8, 8, true);
    let ids: Vec<ParamId> = base.ids().collect();
    let base2 = base.clone();
    GradCase::new(
        name,
        move |rng| {
            ids.iter()
                .map(|&id| {
                    let v = base.value(id);
                    Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] + 0.3 * (rng.random::<f64>() - 0.5))
                })
                .collect()
        },
        move |tape, xs| {
            let p = Binder::with_vars(tape, &base2, base2.ids().zip(xs.iter().copied()));
            let out = model.forward(&p, &frames, phase);
            let mut terms = vec![
                out.means.square().mean(),
                out.opacity.mean(),
                out.quats.slice_cols(1, 4).square().mean(),
                out.scales.mean(),
                out.colors.square().mean(),
            ];
            if let Some(c) = out.camera {
                terms.push(c.square().sum());
            }
            if let (Some(pm), Some(cf)) = (out.pointmap, out.confidence) {
                terms.push(pm.mean().mul(cf.mean()));
            }
            terms.into_iter().reduce(|a, b| a.add(b)).unwrap()
        },
    )
}

#[test]
fn model_gradients() {
    for case in [
        model_case("model_nvs", Phase::Nvs, 2),
        model_case("model_distill", Phase::Distill, 3),
    ] {
        case.check_seeds(0, 2, DEFAULT_EPS, DEFAULT_TOL).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pixel_alignment_and_pose_validity(t in 1usize..=4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, mut store) = build(toy_config(8, 16), seed);
        perturb(&mut store, &mut rng, 2.0);
        let f = random_frames(&mut rng, t, 8, 16, seed % 2 == 0);
        let out = m.predict(&store, &f, Phase::Distill).unwrap();
        prop_assert_eq!(out.gaussians.len(), t * 128);
        prop_assert_eq!(out.poses.get(0), UnitDualQuat::IDENTITY);
        for pose in out.poses.iter() {
            prop_assert!(UnitDualQuat::new(pose.real(), pose.dual()).is_ok());
        }
        for g in &out.gaussians.gaussians {
            prop_assert!(g.opacity > 0.0 && g.opacity < 1.0);
            for s in g.scale {
                prop_assert!(s >= LOG_SCALE_MIN.exp() && s <= LOG_SCALE_MAX.exp());
            }
        }
        prop_assert!(out.confidence.unwrap().data().iter().all(|&c| c > 0.0));
    }
}

//! Built-in verification suites: gradients, attention masks, zero-init
//! equivalence, dual-quaternion algebra and the renderer.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, build_blocked_causal_mask, video_camera_attention, BlockConfig, BlockContext, DecoderBlock, TokenState, TokenVars};
use crate::dualquat::{self, align_loss, dq_align_loss, PoseSE3, PoseSet, Quat, UnitDualQuat, UNIT_TOL};
use crate::evalmetrics::psnr;
use crate::gsplat::{self, composite_weights, render, CameraModel, Gaussian, GaussianSet, Intrinsics, RenderConfig};
use crate::losses::{self, total_loss, LossContext, LossWeights};
use crate::model::{Model, ModelConfig, Phase};
use crate::nn::Binder;
use crate::numerics::gradcheck::{self, DEFAULT_EPS, DEFAULT_TOL};
use crate::numerics::{ExecMode, GradCase, ParamId, ParamStore, Tape, Tensor};
use crate::scenegen::{generate_scene, oracle_gaussians, sample_training_clip, SceneConfig, ORACLE_FOOTPRINT};

/// Deliberate bugs the suites must catch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Conjugation leaves the dual part's vector unnegated.
    ConjugateSign,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conjugate-sign" => Ok(Fault::ConjugateSign),
            _ => Err(format!("unknown fault `{s}`; valid: conjugate-sign")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    /// Seeds per gradient case.
    pub grad_seeds: u64,
    pub fault: Option<Fault>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            grad_seeds: 10,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestReport {
    pub suites: Vec<SuiteReport>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn pass(&self) -> bool {
        self.suites.iter().all(SuiteReport::pass)
    }
}

struct Suite {
    name: &'static str,
    start: Instant,
    checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            start: Instant::now(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            suite: self.name.into(),
            checks: self.checks,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Runs every suite.
pub fn run(opts: &SelftestOptions) -> SelftestReport {
    let start = Instant::now();
    let suites = vec![
        gradient_suite(opts.grad_seeds),
        mask_suite(),
        zero_init_suite(),
        dualquat_suite(opts.fault),
        renderer_suite(),
    ];
    SelftestReport {
        suites,
        seconds: start.elapsed().as_secs_f64(),
    }
}

// ── gradients ───────────────────────────────────────────────────────────

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        patch: 8,
        dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 2,
        ffn_mult: 1,
        max_views: 2,
        default_focal: 16.0,
        ..ModelConfig::default()
    }
}

fn tiny_scene_config() -> SceneConfig {
    SceneConfig {
        width: 16,
        height: 16,
        focal: 16.0,
        trajectory_len: 8,
        supersample: 1,
        ..SceneConfig::default()
    }
}

/// Two-frame 16x16 training loss as a function of every model parameter.
pub fn end_to_end_case(phase: Phase) -> GradCase {
    let scene_cfg = tiny_scene_config();
    let clip = sample_training_clip(&generate_scene(11, &scene_cfg).expect("fixed scene"), 2, 2, 0);
    let mut store = ParamStore::new();
    let model = Model::new(tiny_model_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(12)).expect("valid config");
    let ids: Vec<ParamId> = store.ids().collect();
    let base = store.clone();
    let name = match phase {
        Phase::Nvs => "end_to_end_nvs",
        Phase::Distill => "end_to_end_distill",
    };
    GradCase::new(
        name,
        move |rng| {
            ids.iter()
                .map(|&id| {
                    let v = store.value(id);
                    Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] + 0.05 * (rng.random::<f64>() - 0.5))
                })
                .collect()
        },
        move |tape, xs| {
            let p = Binder::with_vars(tape, &base, base.ids().zip(xs.iter().copied()));
            let out = model.forward(&p, &clip.frames, phase);
            let ctx = LossContext::for_scene(&scene_cfg, LossWeights::default());
            total_loss(&out, &clip, phase, &ctx).expect("matching shapes").0
        },
    )
    .with_probes(40)
    .with_kink_screen()
}

/// Every registered gradient case.
pub fn all_grad_cases() -> Vec<GradCase> {
    let mut v = gradcheck::cases();
    v.extend(dualquat::grad_cases());
    v.extend(attention::grad_cases());
    v.extend(gsplat::grad_cases());
    v.extend(losses::grad_cases());
    v.push(end_to_end_case(Phase::Nvs));
    v.push(end_to_end_case(Phase::Distill));
    v
}

pub fn gradient_suite(seeds: u64) -> SuiteReport {
    let mut s = Suite::new("gradients");
    let cases = all_grad_cases();
    let mut covered = BTreeSet::new();
    let mut end_to_end = BTreeSet::new();
    for case in &cases {
        let names = case.op_names();
        if case.name.starts_with("end_to_end") {
            end_to_end.extend(names);
        } else {
            covered.extend(names);
        }
        match case.check_seeds(0, seeds, DEFAULT_EPS, DEFAULT_TOL) {
            Ok(r) => s.check(
                &case.name,
                r.pass,
                format!(
                    "worst rel err {:.2e} over {seeds} seeds, {} probes, {} screened kinks",
                    r.max_rel_err, r.numel, r.kinks
                ),
            ),
            Err(e) => s.check(&case.name, false, e.to_string()),
        }
    }
    let missing: Vec<_> = end_to_end.difference(&covered).copied().collect();
    s.check(
        "primitive_coverage",
        missing.is_empty(),
        if missing.is_empty() {
            format!("{} primitives in the training graph all have unit cases", end_to_end.len())
        } else {
            format!("no unit case for: {}", missing.join(", "))
        },
    );
    s.finish()
}

// ── masks and causality ─────────────────────────────────────────────────

pub fn mask_suite() -> SuiteReport {
    let mut s = Suite::new("masks");
    let mut bad = None;
    'outer: for t in 1..=8 {
        for l in 1..=16 {
            let m = build_blocked_causal_mask(t, l);
            let stride = 1 + l;
            for i in 0..t * stride {
                for j in 0..t * stride {
                    // Camera tokens lead each frame block and see frames <= their own.
                    let want = i % stride != 0 || j / stride <= i / stride;
                    if m.allows(i, j) != want {
                        bad = Some((t, l, i, j));
                        break 'outer;
                    }
                }
            }
        }
    }
    s.check(
        "blocked_causal_mask",
        bad.is_none(),
        match bad {
            None => "all T <= 8, L <= 16".to_string(),
            Some((t, l, i, j)) => format!("T={t} L={l}: entry ({i},{j}) wrong"),
        },
    );

    let (ok, detail) = camera_causality();
    s.check("camera_token_causality", ok, detail);
    s.finish()
}

fn camera_causality() -> (bool, String) {
    let cfg = BlockConfig::new(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let block = DecoderBlock::new(&mut store, "b", &cfg, &mut rng);
    let (frames, grid) = (4, (2, 2));
    let state = TokenState::new(
        Tensor::from_fn([frames * 4, 8], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn([frames, 8], |_| rng.random_range(-1.0..1.0)),
        frames,
        grid,
    );
    let run = |s: &TokenState| {
        let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
        let p = Binder::new(&tape, &store);
        let ctx = BlockContext::new(s.frames, s.grid, &cfg);
        video_camera_attention(&p, &block.vca_norm, &block.vca, TokenVars::constant(&tape, s), &ctx).to_state()
    };
    let base = run(&state);
    for t in 0..frames - 1 {
        let mut p = state.clone();
        for f in t + 1..frames {
            p.camera.data_mut()[f * 8..(f + 1) * 8].iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
            p.visual.data_mut()[f * 32..(f + 1) * 32].iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        }
        let out = run(&p);
        for u in 0..=t {
            if out.camera.row(u) != base.camera.row(u) {
                return (false, format!("camera token {u} changed when frames > {t} were perturbed"));
            }
        }
        if out.camera.row(frames - 1) == base.camera.row(frames - 1) {
            return (false, "perturbation did not reach the last camera token".into());
        }
    }
    (true, "earlier camera tokens bit-identical under future-frame perturbation".into())
}

// ── zero-init equivalence ───────────────────────────────────────────────

pub fn zero_init_suite() -> SuiteReport {
    let mut s = Suite::new("zero_init");
    let cfg = ModelConfig {
        max_views: 4,
        ..ModelConfig::default()
    };
    let scene = generate_scene(3, &SceneConfig::default()).expect("fixed scene");
    let clip = sample_training_clip(&scene, 4, 2, 0);
    let mut store = ParamStore::new();
    let on = Model::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).expect("valid config");
    let mut off_cfg = cfg;
    off_cfg.flags.modulation = false;
    let off = Model {
        config: off_cfg,
        ..on.clone()
    };
    let mut ok = true;
    let mut detail = String::from("modulation on and off give bit-identical outputs in both phases");
    for phase in [Phase::Nvs, Phase::Distill] {
        let a = on.predict(&store, &clip.frames, phase).expect("valid input");
        let b = off.predict(&store, &clip.frames, phase).expect("valid input");
        if a != b {
            ok = false;
            detail = format!("outputs differ in phase {phase:?}");
        }
    }
    s.check("modulation_zero_init", ok, detail);
    s.finish()
}

// ── dual quaternions ────────────────────────────────────────────────────

fn random_udq(rng: &mut impl Rng) -> UnitDualQuat {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    let angle = rng.random_range(-3.1..3.1);
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    UnitDualQuat::from_rotation_translation(Quat::from_axis_angle(axis, angle), t)
}

fn unit_error(p: UnitDualQuat) -> f64 {
    let (r, d) = (p.real(), p.dual());
    (r.norm() - 1.0).abs().max(r.dot(d).abs())
}

pub fn dualquat_suite(fault: Option<Fault>) -> SuiteReport {
    dualquat::set_conjugate_fault(fault == Some(Fault::ConjugateSign));
    let report = dualquat_checks();
    dualquat::set_conjugate_fault(false);
    report
}

fn dualquat_checks() -> SuiteReport {
    let mut s = Suite::new("dualquat");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples: Vec<UnitDualQuat> = (0..1000).map(|_| random_udq(&mut rng)).collect();

    let closure = samples.windows(2).map(|w| unit_error(w[0].mul(w[1]))).fold(0.0, f64::max);
    s.check("closure", closure < UNIT_TOL, format!("max unit-constraint error {closure:.2e}"));

    let ident = samples
        .iter()
        .map(|p| p.mul(p.conjugate()).max_diff(UnitDualQuat::IDENTITY))
        .fold(0.0, f64::max);
    s.check("conjugate_product_identity", ident < 1e-6, format!("max |p p* - I| {ident:.2e}"));

    let invol = samples.iter().map(|p| p.conjugate().conjugate().max_diff(p.canonical())).fold(0.0, f64::max);
    s.check("conjugate_involution", invol < 1e-12, format!("max error {invol:.2e}"));

    let mut rot_err: f64 = 0.0;
    let mut trans_err: f64 = 0.0;
    for p in &samples {
        let se3 = p.to_se3();
        let back = UnitDualQuat::from_se3(&se3).to_se3();
        let rel = PoseSE3::new(se3.rotation.transpose() * back.rotation, Vector3::zeros()).map_or(f64::INFINITY, |r| r.angle());
        rot_err = rot_err.max(rel);
        trans_err = trans_err.max((se3.translation - back.translation).norm());
    }
    s.check(
        "se3_round_trip",
        rot_err < 1e-6 && trans_err < 1e-6,
        format!("rotation {rot_err:.2e} rad, translation {trans_err:.2e}"),
    );

    let gt = PoseSet::canonicalize(&samples[..6]);
    let at_truth = dq_align_loss(&gt, &gt).unwrap_or(f64::INFINITY);
    s.check("loss_at_truth", at_truth.abs() < 1e-12, format!("align loss {at_truth:.2e}"));

    let mut flipped = gt.as_slice().to_vec();
    let neg: Vec<f64> = flipped[3].to_array().iter().map(|v| -v).collect();
    flipped[3] = UnitDualQuat::from_raw(neg.try_into().expect("8 values")).expect("unit input");
    let flipped = PoseSet::canonicalize(&flipped);
    let cover = dq_align_loss(&flipped, &gt).unwrap_or(f64::INFINITY);
    s.check("double_cover", cover.abs() < 1e-12, format!("align loss with one sign flip {cover:.2e}"));

    let (ok, detail) = toy_optimization(&mut rng);
    s.check("toy_optimization", ok, detail);
    s.finish()
}

/// Gradient descent on one raw 8-vector through the unit projection and the
/// alignment loss, with a backtracking step.
fn toy_optimization(rng: &mut impl Rng) -> (bool, String) {
    let target = random_udq(rng);
    let gt = PoseSet::new(vec![UnitDualQuat::IDENTITY, target]).expect("unit poses");
    let mut raw: Vec<f64> = random_udq(rng).to_array().to_vec();
    if raw[0] < 0.5 {
        raw = UnitDualQuat::IDENTITY.to_array().to_vec();
        raw[5] = 0.5;
    }
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
        let v = tape.leaf(Tensor::new([1, 8], x.to_vec()));
        let loss = align_loss(v.dq_normalize(), &gt);
        let g = tape.backward(loss).map(|g| g.wrt(v).map(<[f64]>::to_vec).unwrap_or_default());
        (loss.item(), g.unwrap_or_default())
    };
    let (mut f, mut g) = eval(&raw);
    let mut step = 0.1;
    for it in 0..500 {
        if f < 1e-6 {
            return (true, format!("loss {f:.2e} after {it} steps"));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = raw.iter().zip(&g).map(|(x, d)| x - step * d).collect();
            let (ft, gt) = eval(&trial);
            if ft < f {
                (raw, f, g) = (trial, ft, gt);
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return (false, format!("stalled at loss {f:.2e} after {it} steps"));
        }
    }
    (f < 1e-6, format!("loss {f:.2e} after 500 steps"))
}

// ── renderer ────────────────────────────────────────────────────────────

fn random_gaussians(rng: &mut impl Rng, n: usize) -> GaussianSet {
    let mut gs = GaussianSet::new(0);
    for _ in 0..n {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let q = q.scale(1.0 / q.norm());
        gs.push(Gaussian {
            center: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..5.0)],
            opacity: rng.random_range(0.05..0.95),
            rotation: q.to_array(),
            scale: [rng.random_range(0.02..0.3), rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)],
            color: (0..3).map(|_| rng.random()).collect(),
        });
    }
    gs
}

pub fn renderer_suite() -> SuiteReport {
    let mut s = Suite::new("renderer");
    let cfg = RenderConfig::default();

    let scene_cfg = SceneConfig::default();
    let mut worst = f64::INFINITY;
    for seed in 0..3 {
        let clip = sample_training_clip(&generate_scene(seed, &scene_cfg).expect("default config"), 2, 2, 0);
        let gs = oracle_gaussians(&clip, ORACLE_FOOTPRINT, false);
        let rcfg = RenderConfig {
            background: scene_cfg.background,
            ..RenderConfig::default()
        };
        for (img, pose) in clip.frames.images.iter().zip(clip.poses.iter()) {
            let out = render(&gs, &CameraModel::from_pose(clip.intrinsics, pose), &rcfg);
            worst = worst.min(psnr(&out.rgb, img).unwrap_or(0.0));
        }
    }
    s.check("oracle_round_trip", worst > 30.0, format!("worst input-view PSNR {worst:.2} dB"));

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let intr = Intrinsics::centered(24.0, 24, 20);
    let mut eq_err: f64 = 0.0;
    for _ in 0..5 {
        let gs = random_gaussians(&mut rng, 40);
        let pose = UnitDualQuat::from_rotation_translation(
            Quat::from_axis_angle(Vector3::new(0.1, 1.0, 0.2), rng.random_range(-0.2..0.2)),
            Vector3::new(rng.random_range(-0.2..0.2), 0.0, rng.random_range(-0.3..0.3)),
        );
        let m = random_udq(&mut rng);
        let a = render(&gs, &CameraModel::from_pose(intr, &pose), &cfg);
        let b = render(&gs.transformed(&m), &CameraModel::from_pose(intr, &m.mul(pose)), &cfg);
        let d = a.rgb.iter().zip(&b.rgb).chain(a.alpha.iter().zip(&b.alpha)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        eq_err = eq_err.max(d);
    }
    s.check("rigid_equivariance", eq_err < 1e-5, format!("max channel difference {eq_err:.2e}"));

    let cam = CameraModel::from_pose(intr, &UnitDualQuat::IDENTITY);
    let det = RenderConfig::default();
    let gs = random_gaussians(&mut rng, 30);
    let base = render(&gs, &cam, &det);
    let mut with_zero = gs.clone();
    for mut g in random_gaussians(&mut rng, 15).gaussians {
        g.opacity = 0.0;
        with_zero.push(g);
    }
    let zero = render(&with_zero, &cam, &det);
    s.check("zero_opacity_noop", zero == base, "alpha = 0 Gaussians leave every channel bit-identical");

    let mut worst_sum: f64 = 0.0;
    let mut out_of_range = 0;
    let mut alpha_gap: f64 = 0.0;
    for _ in 0..5 {
        let gs = random_gaussians(&mut rng, 60);
        let w = composite_weights(&gs, &cam, &det);
        let out = render(&gs, &cam, &det);
        for (px, ws) in w.iter().enumerate() {
            out_of_range += ws.iter().filter(|(_, v)| !(0.0..=1.0).contains(v)).count();
            let sum: f64 = ws.iter().map(|(_, v)| v).sum();
            worst_sum = worst_sum.max(sum);
            alpha_gap = alpha_gap.max((sum - out.alpha[px]).abs());
        }
    }
    s.check(
        "compositing_weights",
        out_of_range == 0 && worst_sum <= 1.0 + 1e-12 && alpha_gap < 1e-12,
        format!("{out_of_range} weights outside [0,1], max per-pixel sum {worst_sum:.6}, alpha mismatch {alpha_gap:.1e}"),
    );
    s.finish()
}

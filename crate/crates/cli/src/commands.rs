use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use posesplat::dualquat::{format_pose_file, UnitDualQuat};
use posesplat::evalmetrics::{evaluate_scene, AlignMode, EvalOptions, EvalReport};
use posesplat::gsplat::{export_ply, import_ply, render, save_depth16, save_rgb, CameraModel, Intrinsics, RenderConfig};
use posesplat::model::{Checkpoint, Model, ModelConfig, ModelError, Phase};
use posesplat::scenegen::{clip_indices, generate_scene, ingest_image_folder, max_clip_start, read_scene_dir, write_scene_dir, SceneConfig};
use posesplat::selftest::{self, SelftestOptions};
use posesplat::trainer::{eval_clips, TrainConfig, TrainError, Trainer};
use serde::Serialize;

use crate::manifest::ManifestBuilder;
use crate::{Command, Failure, OutArg};

type Result<T> = std::result::Result<T, Failure>;

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

fn out_dir(arg: &OutArg, command: &str) -> PathBuf {
    arg.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("POSESPLAT_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(data)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(data)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display())).map_err(data)
}

/// Runs a command body, then writes its manifest whatever the outcome.
fn with_manifest(command: &str, dir: &Path, body: impl FnOnce(&mut ManifestBuilder) -> Result<()>) -> Result<()> {
    let mut m = ManifestBuilder::new(command);
    let r = body(&mut m);
    let exit = match &r {
        Ok(()) => "ok",
        Err(f) => f.label(),
    };
    let path = m.finish(dir, exit).map_err(Failure::Data)?;
    log::info!("manifest {}", path.display());
    r
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { seeds, config, out } => {
            let dir = out_dir(&out, "generate");
            with_manifest("generate", &dir, |m| generate(m, &seeds.0, config.as_deref(), &dir))
        }
        Command::Train {
            config,
            resume,
            seed,
            ablate,
            max_steps,
            out,
        } => {
            let dir = out_dir(&out, "train");
            with_manifest("train", &dir, |m| train(m, &config, resume.as_deref(), seed, ablate, max_steps, &dir))
        }
        Command::Infer {
            checkpoint,
            input,
            views,
            interval,
            start,
            focal,
            out,
        } => {
            let dir = out_dir(&out, "infer");
            let opts = InferOptions {
                views,
                interval,
                start,
                focal,
            };
            with_manifest("infer", &dir, |m| infer(m, &checkpoint, &input, &opts, &dir))
        }
        Command::Render {
            ply,
            cameras,
            width,
            height,
            depth_scale,
            out,
        } => {
            let dir = out_dir(&out, "render");
            with_manifest("render", &dir, |m| render_cmd(m, &ply, &cameras, (width, height), depth_scale, &dir))
        }
        Command::Eval {
            checkpoint,
            seeds,
            views,
            interval,
            align,
            out,
        } => {
            let dir = out_dir(&out, "eval");
            with_manifest("eval", &dir, |m| eval(m, &checkpoint, &seeds.0, views, interval, align, &dir))
        }
        Command::Selftest {
            grad_seeds,
            inject_fault,
            out,
        } => {
            let dir = out_dir(&out, "selftest");
            let opts = SelftestOptions {
                grad_seeds,
                fault: inject_fault,
            };
            with_manifest("selftest", &dir, |m| selftest_cmd(m, &opts, &dir))
        }
    }
}

// ── generate ────────────────────────────────────────────────────────────

fn generate(m: &mut ManifestBuilder, seeds: &[u64], config: Option<&Path>, dir: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            m.input(p).map_err(data)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(data)?;
            toml::from_str::<SceneConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(data)?
        }
        None => SceneConfig::default(),
    };
    m.config(serde_json::json!({ "scene": cfg, "seeds": seeds }));
    m.seed(seeds[0]);
    for &seed in seeds {
        let scene = generate_scene(seed, &cfg).map_err(data)?;
        let sd = dir.join(format!("scene_{seed:06}"));
        write_scene_dir(&sd, &scene).map_err(data)?;
        log::info!("scene {seed} -> {}", sd.display());
        m.output(sd);
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } => Failure::Numerical(e.into()),
        e => Failure::Data(e.into()),
    }
}

fn train(
    m: &mut ManifestBuilder,
    config_path: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    ablate: Vec<posesplat::trainer::Ablation>,
    max_steps: Option<usize>,
    dir: &Path,
) -> Result<()> {
    m.input(config_path).map_err(data)?;
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))
        .map_err(data)?;
    let mut config = TrainConfig::from_toml(&text).map_err(train_failure)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    for a in ablate {
        if !config.ablations.contains(&a) {
            config.ablations.push(a);
        }
    }
    m.config(&config);
    m.seed(config.seed);
    config.validate().map_err(train_failure)?;
    create_dir(dir)?;

    let mut trainer = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(data(anyhow!("resume checkpoint {} does not exist", p.display())));
            }
            m.input(p).map_err(data)?;
            let ck = load_checkpoint(p)?;
            Trainer::resume(config, &ck, Some(dir)).map_err(train_failure)?
        }
        None => Trainer::new(config, Some(dir)).map_err(train_failure)?,
    };
    let r = trainer.run_until(max_steps.unwrap_or(usize::MAX));
    m.output(dir.join("train_log.jsonl"));
    for c in &trainer.checkpoints {
        m.output(c.clone());
    }
    r.map_err(train_failure)?;
    let last = dir.join("last.ckpt");
    trainer.checkpoint().save(&last).map_err(data)?;
    m.output(last);
    let summary = dir.join("summary.json");
    write_json(&summary, &trainer.summary())?;
    m.output(summary);
    log::info!("trained {} steps", trainer.state.step);
    Ok(())
}

// ── infer ───────────────────────────────────────────────────────────────

struct InferOptions {
    views: Option<usize>,
    interval: usize,
    start: usize,
    focal: Option<f64>,
}

#[derive(Serialize)]
struct InferReport {
    views: usize,
    frame_indices: Vec<usize>,
    gaussians: usize,
    latency_ms: f64,
    peak_rss_kib: Option<u64>,
}

fn model_input_error(e: ModelError, cfg: &ModelConfig) -> Failure {
    match e {
        ModelError::Input(msg) => Failure::Data(anyhow!(
            "{msg} (model: {}x{}, max_views = {})",
            cfg.width,
            cfg.height,
            cfg.max_views
        )),
        e => data(e),
    }
}

/// Peak resident set size from procfs, where available.
fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn infer(m: &mut ManifestBuilder, ckpt_path: &Path, input: &Path, o: &InferOptions, dir: &Path) -> Result<()> {
    m.input(ckpt_path).map_err(data)?;
    m.input(input).map_err(data)?;
    let ck = load_checkpoint(ckpt_path)?;
    let (model, store) = Model::from_checkpoint(&ck).map_err(data)?;
    let cfg = model.config.clone();
    let views = o.views.unwrap_or(cfg.max_views);
    if views == 0 || views > cfg.max_views {
        return Err(usage(format!("--views {views} outside 1..={} (model max_views)", cfg.max_views)));
    }
    m.config(serde_json::json!({
        "model": cfg,
        "views": views,
        "interval": o.interval,
        "start": o.start,
        "focal": o.focal,
    }));

    let frames = if input.join("frames").is_dir() {
        let sd = read_scene_dir(input).map_err(data)?;
        let n = sd.frames.len();
        let fits = max_clip_start(n, views, o.interval).is_some_and(|max| o.start <= max);
        if !fits {
            return Err(usage(format!(
                "{views} views at interval {} from frame {} do not fit {n} frames",
                o.interval, o.start
            )));
        }
        sd.frames.select(&clip_indices(views, o.interval, o.start))
    } else {
        let mut f = ingest_image_folder(input, cfg.width, cfg.height, None).map_err(data)?;
        if f.len() < views {
            return Err(usage(format!("{} images found, {views} views requested", f.len())));
        }
        f = f.select(&(0..views).collect::<Vec<_>>());
        if let Some(focal) = o.focal {
            f.intrinsics = Some(vec![Intrinsics::centered(focal, cfg.width, cfg.height); f.len()]);
        }
        f
    };

    let t0 = Instant::now();
    let out = model.predict(&store, &frames, Phase::Nvs).map_err(|e| model_input_error(e, &cfg))?;
    let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
    let report = InferReport {
        views,
        frame_indices: frames.indices.clone(),
        gaussians: out.gaussians.len(),
        latency_ms,
        peak_rss_kib: peak_rss_kib(),
    };
    log::info!(
        "{views}-view forward pass: {latency_ms:.1} ms, {} Gaussians, peak RSS {} KiB",
        report.gaussians,
        report.peak_rss_kib.map_or("?".into(), |v| v.to_string())
    );

    create_dir(dir)?;
    let ply = dir.join("gaussians.ply");
    fs::write(&ply, export_ply(&out.gaussians)).with_context(|| format!("writing {}", ply.display())).map_err(data)?;
    let poses = dir.join("poses.txt");
    fs::write(&poses, format_pose_file(&out.poses)).with_context(|| format!("writing {}", poses.display())).map_err(data)?;
    let rep = dir.join("infer.json");
    write_json(&rep, &report)?;
    m.output(ply);
    m.output(poses);
    m.output(rep);
    Ok(())
}

// ── render ──────────────────────────────────────────────────────────────

/// Parses `fx fy cx cy | qr(4) qd(4)` lines; `#` starts a comment.
pub fn parse_camera_spec(text: &str) -> anyhow::Result<Vec<([f64; 4], UnitDualQuat)>> {
    let mut cams = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ctx = || format!("camera spec line {}", n + 1);
        let (k, q) = line
            .split_once('|')
            .ok_or_else(|| anyhow!("expected `fx fy cx cy | qr(4) qd(4)`"))
            .with_context(ctx)?;
        let nums = |s: &str| -> anyhow::Result<Vec<f64>> {
            s.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| anyhow!("bad number `{v}`")))
                .collect()
        };
        let k = nums(k).with_context(ctx)?;
        let q = nums(q).with_context(ctx)?;
        if k.len() != 4 || q.len() != 8 {
            return Err(anyhow!("expected 4 intrinsics and 8 pose values, found {} and {}", k.len(), q.len())).with_context(ctx);
        }
        let pose = UnitDualQuat::from_array(q.try_into().expect("8 values")).map_err(|e| anyhow!("{e}")).with_context(ctx)?;
        cams.push((k.try_into().expect("4 values"), pose));
    }
    if cams.is_empty() {
        return Err(anyhow!("camera spec has no cameras"));
    }
    Ok(cams)
}

fn render_cmd(
    m: &mut ManifestBuilder,
    ply: &Path,
    cameras: &Path,
    size: (Option<usize>, Option<usize>),
    depth_scale: f64,
    dir: &Path,
) -> Result<()> {
    m.input(ply).map_err(data)?;
    m.input(cameras).map_err(data)?;
    m.config(serde_json::json!({ "width": size.0, "height": size.1, "depth_scale": depth_scale }));
    let bytes = fs::read(ply).with_context(|| format!("reading {}", ply.display())).map_err(data)?;
    let gs = import_ply(&bytes).with_context(|| format!("parsing {}", ply.display())).map_err(data)?;
    let text = fs::read_to_string(cameras).with_context(|| format!("reading {}", cameras.display())).map_err(data)?;
    let cams = parse_camera_spec(&text).map_err(data)?;
    create_dir(dir)?;
    let cfg = RenderConfig::default();
    for (i, ([fx, fy, cx, cy], pose)) in cams.into_iter().enumerate() {
        let width = size.0.unwrap_or((2.0 * cx).round() as usize);
        let height = size.1.unwrap_or((2.0 * cy).round() as usize);
        if width == 0 || height == 0 {
            return Err(data(anyhow!("camera {i}: empty image size {width}x{height}")));
        }
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        let out = render(&gs, &CameraModel::from_pose(k, &pose), &cfg);
        if out.rgb.iter().chain(&out.depth).any(|v| !v.is_finite()) {
            return Err(Failure::Numerical(anyhow!("camera {i}: non-finite render output")));
        }
        let rgb = dir.join(format!("rgb_{i:03}.png"));
        let depth = dir.join(format!("depth_{i:03}.png"));
        save_rgb(&rgb, &out.rgb, width, height).map_err(data)?;
        save_depth16(&depth, &out.depth, width, height, depth_scale).map_err(data)?;
        m.output(rgb);
        m.output(depth);
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

/// Scene settings used in training, or defaults matched to the model.
fn scene_config_for(ck: &Checkpoint) -> SceneConfig {
    if let Some(s) = ck.header.extra.get("train_config").and_then(|c| c.get("scene")) {
        if let Ok(cfg) = serde_json::from_value::<SceneConfig>(s.clone()) {
            return cfg;
        }
    }
    let c = &ck.header.config;
    SceneConfig {
        width: c.width,
        height: c.height,
        focal: c.default_focal,
        ..SceneConfig::default()
    }
}

fn config_digest(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(cfg).unwrap_or_default();
    Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn eval(
    m: &mut ManifestBuilder,
    ckpt_path: &Path,
    seeds: &[u64],
    views: Option<usize>,
    interval: usize,
    align: AlignMode,
    dir: &Path,
) -> Result<()> {
    m.input(ckpt_path).map_err(data)?;
    let ck = load_checkpoint(ckpt_path)?;
    let (model, store) = Model::from_checkpoint(&ck).map_err(data)?;
    let views = views.unwrap_or(model.config.max_views);
    if views == 0 || views > model.config.max_views {
        return Err(usage(format!("--views {views} outside 1..={} (model max_views)", model.config.max_views)));
    }
    let scene_cfg = scene_config_for(&ck);
    if max_clip_start(scene_cfg.trajectory_len, views, interval).is_none() {
        return Err(usage(format!(
            "{views} views at interval {interval} do not fit a {}-frame trajectory",
            scene_cfg.trajectory_len
        )));
    }
    let opts = EvalOptions {
        align,
        render: RenderConfig {
            background: scene_cfg.background,
            ..RenderConfig::default()
        },
        ..EvalOptions::default()
    };
    m.config(serde_json::json!({
        "model": model.config,
        "scene": scene_cfg,
        "seeds": seeds,
        "views": views,
        "interval": interval,
        "options": opts,
    }));
    m.seed(seeds[0]);
    let scenes = seeds
        .iter()
        .map(|&s| generate_scene(s, &scene_cfg))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(data)?;
    let rows = eval_clips(&scenes, views, interval)
        .iter()
        .map(|c| evaluate_scene(&model, &store, c, &opts))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| model_input_error(e, &model.config))?;
    let report = EvalReport::new(config_digest(&model.config), views, align, rows);
    let mean = &report.mean;
    log::info!(
        "{} scenes: target PSNR {:.2}, SSIM {:.3}, ATE {}",
        report.rows.len(),
        mean.target_psnr,
        mean.target_ssim,
        mean.ate.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    if !mean.input_psnr.is_finite() {
        return Err(Failure::Numerical(anyhow!("non-finite metrics")));
    }
    create_dir(dir)?;
    let path = dir.join("eval.json");
    write_json(&path, &report)?;
    m.output(path);
    Ok(())
}

// ── selftest ────────────────────────────────────────────────────────────

fn selftest_cmd(m: &mut ManifestBuilder, opts: &SelftestOptions, dir: &Path) -> Result<()> {
    m.config(serde_json::json!({
        "grad_seeds": opts.grad_seeds,
        "fault": opts.fault.map(|f| format!("{f:?}")),
    }));
    let report = selftest::run(opts);
    for s in &report.suites {
        for c in &s.checks {
            println!("{} {}/{}: {}", if c.pass { "PASS" } else { "FAIL" }, s.suite, c.name, c.detail);
        }
        println!("suite {} {} in {:.1}s", s.suite, if s.pass() { "passed" } else { "FAILED" }, s.seconds);
    }
    println!("selftest {} in {:.1}s", if report.pass() { "passed" } else { "FAILED" }, report.seconds);
    create_dir(dir)?;
    let path = dir.join("selftest.json");
    write_json(&path, &report)?;
    m.output(path);
    if report.pass() {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .suites
            .iter()
            .flat_map(|s| s.failures().into_iter().map(move |c| format!("{}/{}", s.suite, c.name)))
            .collect();
        Err(Failure::Numerical(anyhow!("failed checks: {}", failed.join(", "))))
    }
}

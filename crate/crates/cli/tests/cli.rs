use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_TRAIN: &str = r#"
seed = 3
batch = 1
train_scenes = 2
val_seeds = [900]
val_every = 4
checkpoint_every = 4

[model]
height = 16
width = 16
patch = 4
dim = 16
encoder_depth = 1
decoder_depth = 1
heads = 2
ffn_mult = 2
max_views = 2
default_focal = 16.0

[scene]
width = 16
height = 16
focal = 16.0
primitives = 50
trajectory_len = 10
supersample = 1

[[schedule.stages]]
phase = "nvs"
views = 2
steps = 8
lambda = 0.1
interval = { start = 1, end = 2, steps = 4 }
lr = { peak = 1e-3, warmup = 0.1, floor = 0.1 }
"#;

const TINY_SCENE: &str = "width = 16\nheight = 16\nfocal = 16.0\nprimitives = 50\ntrajectory_len = 10\nsupersample = 1\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_posesplat"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.toml"), TINY_TRAIN).unwrap();
    fs::write(dir.path().join("scene.toml"), TINY_SCENE).unwrap();
    dir
}

fn trained(dir: &Path, out: &str) -> PathBuf {
    let o = run(dir, &["train", "train.toml", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join(out).join("last.ckpt")
}

#[test]
fn unknown_ablation_is_a_usage_error_listing_valid_names() {
    let dir = setup();
    let o = run(dir.path(), &["train", "train.toml", "--ablate=no_cna,bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for name in ["no_modulation", "no_cna", "full_camera_attention", "no_align_loss", "quat_trans", "no_intrinsics"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn same_seed_runs_write_identical_logs_and_one_manifest() {
    let dir = setup();
    trained(dir.path(), "a");
    trained(dir.path(), "b");
    let log = |r: &str| fs::read_to_string(dir.path().join(r).join("train_log.jsonl")).unwrap();
    assert_eq!(log("a"), log("b"));
    assert!(log("a").lines().count() >= 8);

    let m = json(dir.path().join("a/manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["model"]["dim"], 16);
    assert_eq!(m["exit"], "ok");
    assert_eq!(m["inputs"]["train.toml"].as_str().unwrap().len(), 64);
    assert!(m["code_version"].as_str().unwrap().contains("sha256:"));
    assert!(m["outputs"].as_array().unwrap().iter().any(|p| p.as_str().unwrap().ends_with("last.ckpt")));
    assert!(m["wall_clock_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn seed_and_ablation_flags_override_the_config() {
    let dir = setup();
    let o = run(dir.path(), &["train", "train.toml", "--seed", "11", "--ablate=no_cna", "--max-steps", "2", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(dir.path().join("r/manifest.json"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["ablations"][0], "no_cna");
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = setup();
    trained(dir.path(), "full");
    let o = run(dir.path(), &["train", "train.toml", "--max-steps", "4", "--out", "split"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir.path(), &["train", "train.toml", "--resume", "split/last.ckpt", "--out", "split"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let steps = |r: &str| -> Vec<String> {
        fs::read_to_string(dir.path().join(r).join("train_log.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"kind\":\"step\""))
            .map(String::from)
            .collect()
    };
    assert_eq!(steps("full"), steps("split"));
}

#[test]
fn resume_from_a_missing_checkpoint_is_a_data_error() {
    let dir = setup();
    let o = run(dir.path(), &["train", "train.toml", "--resume", "nope.ckpt", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ckpt"));
    assert_eq!(json(dir.path().join("r/manifest.json"))["exit"], "data error");
}

#[test]
fn infer_render_round_trip() {
    let dir = setup();
    let ckpt = trained(dir.path(), "t");
    let o = run(dir.path(), &["generate", "--seeds", "40,41", "--config", "scene.toml", "--out", "gen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("gen/scene_000041/frames/000.png").exists());

    let ck = ckpt.to_str().unwrap();
    let o = run(dir.path(), &["infer", ck, "gen/scene_000040", "--views", "3", "--out", "bad"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max_views"), "{}", stderr(&o));

    let o = run(dir.path(), &["infer", ck, "gen/scene_000040", "--views", "2", "--interval", "2", "--out", "inf"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ply = fs::read(dir.path().join("inf/gaussians.ply")).unwrap();
    let header = String::from_utf8_lossy(&ply[..ply.windows(11).position(|w| w == b"end_header\n").unwrap()]).into_owned();
    assert!(header.contains(&format!("element vertex {}", 2 * 16 * 16)), "{header}");
    let poses = fs::read_to_string(dir.path().join("inf/poses.txt")).unwrap();
    let first: Vec<f64> = poses.lines().next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(poses.lines().count(), 2);
    let rep = json(dir.path().join("inf/infer.json"));
    assert!(rep["latency_ms"].as_f64().unwrap() > 0.0);

    fs::write(dir.path().join("cams.txt"), "# fx fy cx cy | qr qd\n16 16 8 8 | 1 0 0 0 0 0 0 0\n16 16 8 8 | 1 0 0 0 0 0 0 0.05\n").unwrap();
    let o = run(dir.path(), &["render", "inf/gaussians.ply", "cams.txt", "--out", "ren"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..2 {
        let depth = fs::read(dir.path().join(format!("ren/depth_{i:03}.png"))).unwrap();
        // IHDR: bit depth 16, grayscale.
        assert_eq!((depth[24], depth[25]), (16, 0));
        assert!(dir.path().join(format!("ren/rgb_{i:03}.png")).exists());
    }

    // An empty splat set renders the background.
    let mut empty = header.replace(&format!("element vertex {}", 2 * 16 * 16), "element vertex 0").into_bytes();
    empty.extend_from_slice(b"end_header\n");
    fs::write(dir.path().join("empty.ply"), empty).unwrap();
    let o = run(dir.path(), &["render", "empty.ply", "cams.txt", "--out", "bg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rgb = fs::read(dir.path().join("bg/rgb_000.png")).unwrap();
    let again = fs::read(dir.path().join("bg/rgb_001.png")).unwrap();
    assert_eq!(rgb, again);

    fs::write(dir.path().join("bad.txt"), "16 16 8 8 1 0 0 0 0 0 0 0\n").unwrap();
    let o = run(dir.path(), &["render", "inf/gaussians.ply", "bad.txt", "--out", "bad2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn eval_alignment_never_increases_ate() {
    let dir = setup();
    let ckpt = trained(dir.path(), "t");
    let ck = ckpt.to_str().unwrap();
    let mut reports = Vec::new();
    for align in ["none", "similarity"] {
        let out = format!("ev_{align}");
        let o = run(dir.path(), &["eval", ck, "--seeds", "500..503", "--views", "2", "--align", align, "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(json(dir.path().join(out).join("eval.json")));
    }
    let (none, sim) = (&reports[0]["rows"], &reports[1]["rows"]);
    assert_eq!(none.as_array().unwrap().len(), 3);
    for (a, b) in none.as_array().unwrap().iter().zip(sim.as_array().unwrap()) {
        let (a, b) = (a["pose"]["ate"].as_f64().unwrap(), b["pose"]["ate"].as_f64().unwrap());
        assert!(b <= a + 1e-12, "similarity {b} > none {a}");
    }
    for key in ["target_psnr", "target_ssim", "input_psnr", "ate", "rpe_trans", "rpe_rot"] {
        assert!(reports[0]["mean"][key].is_number(), "{key}");
    }
    assert_eq!(reports[1]["align"], "similarity");

    let o = run(dir.path(), &["eval", ck, "--align", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_names_the_injected_fault() {
    let dir = setup();
    let o = run(dir.path(), &["selftest", "--grad-seeds", "1", "--inject-fault", "conjugate-sign", "--out", "st"]);
    assert_eq!(o.status.code(), Some(3));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL dualquat/conjugate_product_identity"), "{out}");
    assert!(stderr(&o).contains("dualquat/conjugate_product_identity"));
    let rep = json(dir.path().join("st/selftest.json"));
    assert_eq!(rep["suites"].as_array().unwrap().len(), 5);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = setup();
    let o = bin()
        .current_dir(dir.path())
        .env("POSESPLAT_OUT", dir.path().join("root"))
        .args(["generate", "--seeds", "1", "--config", "scene.toml"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("root/generate/manifest.json").exists());
    assert!(dir.path().join("root/generate/scene_000001/poses.txt").exists());
}

//! Procedural scenes of textured ellipsoids seen along a smooth camera path.
//!
//! Images, depths and point maps are exact ray casts, so the same scene is
//! both a training sample and a geometry teacher.

mod io;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dualquat::{PoseSet, Quat, UnitDualQuat};
use crate::gsplat::{Gaussian, GaussianSet, Intrinsics, Provenance};
use crate::numerics::Tensor;

pub use io::{ingest_image_folder, read_scene_dir, write_scene_dir, SceneDir, SceneMeta};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("seed {seed}: no usable scene after {attempts} attempts (frame coverage below {min:.2})")]
    Coverage { seed: u64, attempts: u32, min: f64 },
    #[error("{path}: {msg}")]
    Ingest { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub primitives: usize,
    /// Frames rendered along the trajectory.
    pub trajectory_len: usize,
    /// Bound on any frame's rotation relative to the first, in degrees.
    pub max_rotation_deg: f64,
    /// Forward travel per keypose segment, before scale normalization.
    pub forward_step: [f64; 2],
    pub lateral_step: f64,
    /// Camera-space depth range for primitive placement.
    pub depth_range: [f64; 2],
    /// Semi-axis range at depth 4; scaled with depth.
    pub axis_range: [f64; 2],
    pub palette: Vec<[f64; 3]>,
    pub texture_freq: [f64; 2],
    pub texture_amp: f64,
    pub background: [f64; 3],
    /// Minimum fraction of hit pixels in every frame.
    pub min_coverage: f64,
    pub max_retries: u32,
    /// Colors average `n x n` rays per pixel; geometry uses the center ray.
    pub supersample: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            focal: 32.0,
            primitives: 60,
            trajectory_len: 16,
            max_rotation_deg: 30.0,
            forward_step: [0.2, 0.4],
            lateral_step: 0.25,
            depth_range: [2.5, 6.0],
            axis_range: [0.3, 0.8],
            palette: vec![
                [0.85, 0.25, 0.2],
                [0.2, 0.6, 0.85],
                [0.9, 0.75, 0.2],
                [0.3, 0.75, 0.35],
                [0.7, 0.4, 0.8],
                [0.9, 0.55, 0.3],
                [0.55, 0.55, 0.6],
            ],
            texture_freq: [2.0, 5.0],
            texture_amp: 0.35,
            background: [0.05, 0.05, 0.08],
            min_coverage: 0.2,
            max_retries: 16,
            supersample: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.into()));
        if !(50..=500).contains(&self.primitives) {
            return bad("primitive count must be within 50..=500");
        }
        if self.width == 0 || self.height == 0 || self.focal <= 0.0 {
            return bad("image size and focal length must be positive");
        }
        if self.trajectory_len < 2 {
            return bad("trajectory needs at least two frames");
        }
        if self.supersample == 0 {
            return bad("supersample factor must be at least 1");
        }
        if self.palette.is_empty() {
            return bad("palette is empty");
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[0] < self.depth_range[1]) {
            return bad("depth range must be positive and increasing");
        }
        if !(self.axis_range[0] > 0.0 && self.axis_range[0] <= self.axis_range[1]) {
            return bad("axis range must be positive and ordered");
        }
        if !(self.forward_step[0] > 0.0 && self.forward_step[0] <= self.forward_step[1]) {
            return bad("forward step must be positive and ordered");
        }
        if !(0.0..=90.0).contains(&self.max_rotation_deg) {
            return bad("max rotation must be within 0..=90 degrees");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.focal, self.width, self.height)
    }
}

/// Input frames: interleaved RGB rows in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub images: Vec<Vec<f64>>,
    pub intrinsics: Option<Vec<Intrinsics>>,
    /// Index of each frame in its source video.
    pub indices: Vec<usize>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            intrinsics: self.intrinsics.as_ref().map(|k| idx.iter().map(|&i| k[i]).collect()),
            indices: idx.iter().map(|&i| self.indices[i]).collect(),
        }
    }
}

/// A textured ellipsoid: `|R^T (p - c) / a| = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    /// Local-to-world rotation `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub axes: [f64; 3],
    pub color: [f64; 3],
    pub stripe_dir: [f64; 3],
    pub stripe_freq: f64,
    pub stripe_phase: f64,
}

impl Ellipsoid {
    fn rot(&self) -> Matrix3<f64> {
        Quat::from_array(self.rotation).to_rotation()
    }

    /// Nearest ray parameter `s > near` with `o + s d` on the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, near: f64) -> Option<f64> {
        let rt = self.rot().transpose();
        let a = Vector3::from(self.axes);
        let oc = rt * (o - Vector3::from(self.center));
        let ol = oc.component_div(&a);
        let dl = (rt * d).component_div(&a);
        let qa = dl.dot(&dl);
        let qb = 2.0 * ol.dot(&dl);
        let qc = ol.dot(&ol) - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 || qc <= 0.0 {
            return None;
        }
        let s = (-qb - disc.sqrt()) / (2.0 * qa);
        (s > near).then_some(s)
    }

    /// Shaded, textured color at surface point `p`.
    pub fn shade(&self, p: &Vector3<f64>, light: &Vector3<f64>, amp: f64) -> [f64; 3] {
        let r = self.rot();
        let a = Vector3::from(self.axes);
        let local = (r.transpose() * (p - Vector3::from(self.center))).component_div(&a);
        let n = (r * local.component_div(&a)).normalize();
        let stripe = 0.5 * (1.0 + (self.stripe_freq * local.dot(&Vector3::from(self.stripe_dir)) + self.stripe_phase).sin());
        let tex = 1.0 - amp * stripe;
        let lambert = 0.55 + 0.45 * n.dot(light).max(0.0);
        self.color.map(|c| (c * tex * lambert).clamp(0.0, 1.0))
    }

    pub fn transformed(&self, m: &UnitDualQuat) -> Self {
        let c = m.transform_point(Vector3::from(self.center));
        let q = m.rotation().mul(Quat::from_array(self.rotation));
        Self {
            center: [c.x, c.y, c.z],
            rotation: q.to_array(),
            ..self.clone()
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            center: self.center.map(|v| v * s),
            axes: self.axes.map(|v| v * s),
            ..self.clone()
        }
    }
}

/// Direction towards the key light, in canonical coordinates.
pub fn light_direction() -> Vector3<f64> {
    Vector3::new(-0.3, -0.6, -0.7).normalize()
}

/// Result of casting one ray per pixel center.
#[derive(Clone, Debug, PartialEq)]
pub struct RayImage {
    pub rgb: Vec<f64>,
    /// Camera-space z of the first hit, `0` on background.
    pub depth: Vec<f64>,
    /// First hit in canonical coordinates, zero on background.
    pub points: Vec<[f64; 3]>,
    pub hit: Vec<bool>,
}

impl RayImage {
    pub fn coverage(&self) -> f64 {
        self.hit.iter().filter(|&&h| h).count() as f64 / self.hit.len() as f64
    }
}

/// Ray casts `prims` from the camera with camera-to-canonical `pose`.
pub fn cast_view(prims: &[Ellipsoid], k: &Intrinsics, pose: &UnitDualQuat, cfg: &SceneConfig) -> RayImage {
    let se3 = pose.to_se3();
    let o = se3.translation;
    let light = light_direction();
    let n = k.width * k.height;
    let first_hit = |d: &Vector3<f64>| {
        prims
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.intersect(&o, d, 1e-6).map(|s| (s, i)))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    };
    let color = |d: &Vector3<f64>| match first_hit(d) {
        Some((s, i)) => prims[i].shade(&(o + s * d), &light, cfg.texture_amp),
        None => cfg.background,
    };
    let mut img = RayImage {
        rgb: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        points: Vec::with_capacity(n),
        hit: Vec::with_capacity(n),
    };
    for py in 0..k.height {
        for px in 0..k.width {
            let d = se3.rotation * k.ray(px, py);
            let best = first_hit(&d);
            let ss = cfg.supersample;
            if ss > 1 {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = px as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = py as f64 + (sy as f64 + 0.5) / ss as f64;
                        let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
                        let c = color(&(se3.rotation * ray));
                        (0..3).for_each(|j| acc[j] += c[j]);
                    }
                }
                img.rgb.extend(acc.map(|a| a / (ss * ss) as f64));
            } else {
                img.rgb.extend(color(&d));
            }
            match best {
                Some((s, _)) => {
                    let p = o + s * d;
                    img.depth.push(s);
                    img.points.push([p.x, p.y, p.z]);
                    img.hit.push(true);
                }
                None => {
                    img.depth.push(0.0);
                    img.points.push([0.0; 3]);
                    img.hit.push(false);
                }
            }
        }
    }
    img
}

/// A view not given to the model, used as a rendering target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetView {
    pub index: usize,
    pub image: Vec<f64>,
    pub pose: UnitDualQuat,
    /// Camera-space depth per pixel, `0` on background.
    pub depth: Vec<f64>,
    /// Interleaved canonical surface points, zero on background.
    pub points: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub seed: u64,
    pub config: SceneConfig,
    pub intrinsics: Intrinsics,
    pub frames: FrameSequence,
    /// Camera-to-canonical poses; the first is the identity.
    pub poses: PoseSet,
    /// `[T * H * W, 3]` first-surface points in canonical coordinates.
    pub pointmaps: Tensor,
    /// `[T * H * W, 1]`: 1 on hit pixels, 0 on background.
    pub confidence: Tensor,
    pub depths: Vec<Vec<f64>>,
    pub targets: Vec<TargetView>,
    /// Scene content in the same canonical coordinates.
    pub primitives: Vec<Ellipsoid>,
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }

    /// Largest distance between any two hit points, a scale for errors.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for (p, &c) in self.pointmaps.data().chunks(3).zip(self.confidence.data()) {
            if c > 0.0 {
                let v = Vector3::new(p[0], p[1], p[2]);
                lo = lo.inf(&v);
                hi = hi.sup(&v);
            }
        }
        if lo.x.is_finite() {
            (hi - lo).norm()
        } else {
            0.0
        }
    }
}

fn euler(yaw: f64, pitch: f64, roll: f64) -> Quat {
    let y = Quat::from_axis_angle(Vector3::y(), yaw);
    let x = Quat::from_axis_angle(Vector3::x(), pitch);
    let z = Quat::from_axis_angle(Vector3::z(), roll);
    y.mul(x).mul(z)
}

fn catmull_rom(p: &[[f64; 6]], u: f64) -> [f64; 6] {
    let segs = p.len() - 1;
    let x = u * segs as f64;
    let i = (x.floor() as usize).min(segs - 1);
    let t = x - i as f64;
    let g = |k: isize| p[(i as isize + k).clamp(0, segs as isize) as usize];
    let (p0, p1, p2, p3) = (g(-1), g(0), g(1), g(2));
    let mut out = [0.0; 6];
    for c in 0..6 {
        out[c] = 0.5
            * (2.0 * p1[c]
                + (-p0[c] + p2[c]) * t
                + (2.0 * p0[c] - 5.0 * p1[c] + 4.0 * p2[c] - p3[c]) * t * t
                + (-p0[c] + 3.0 * p1[c] - 3.0 * p2[c] + p3[c]) * t * t * t);
    }
    out
}

/// Smooth camera path through four random keyposes, starting at the
/// identity; translations are not yet normalized.
fn trajectory(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<UnitDualQuat> {
    let max = cfg.max_rotation_deg.to_radians();
    let mut keys = vec![[0.0; 6]];
    let mut pos = [0.0; 3];
    for _ in 0..3 {
        pos[0] += rng.random_range(-1.0..1.0) * cfg.lateral_step;
        pos[1] += rng.random_range(-1.0..1.0) * cfg.lateral_step * 0.3;
        pos[2] += rng.random_range(cfg.forward_step[0]..=cfg.forward_step[1]);
        keys.push([
            pos[0],
            pos[1],
            pos[2],
            rng.random_range(-1.0..1.0) * max * 0.55,
            rng.random_range(-1.0..1.0) * max * 0.3,
            rng.random_range(-1.0..1.0) * max * 0.1,
        ]);
    }
    (0..cfg.trajectory_len)
        .map(|t| {
            let k = catmull_rom(&keys, t as f64 / (cfg.trajectory_len - 1) as f64);
            let q = if t == 0 { Quat::IDENTITY } else { euler(k[3], k[4], k[5]) };
            let tr = if t == 0 { Vector3::zeros() } else { Vector3::new(k[0], k[1], k[2]) };
            UnitDualQuat::from_rotation_translation(q, tr).canonical()
        })
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    let v: [f64; 4] = std::array::from_fn(|_| rand_distr::StandardNormal.sample(rng));
    let q = Quat::from_array(v);
    q.scale(1.0 / q.norm())
}

fn place_primitives(rng: &mut ChaCha8Rng, cfg: &SceneConfig, path: &[UnitDualQuat]) -> Vec<Ellipsoid> {
    let k = cfg.intrinsics();
    let centers: Vec<Vector3<f64>> = path.iter().map(|p| p.translation()).collect();
    let mut out = Vec::with_capacity(cfg.primitives);
    while out.len() < cfg.primitives {
        let cam = path[rng.random_range(0..path.len())];
        let u = rng.random_range(-0.1..1.1) * k.width as f64;
        let v = rng.random_range(-0.1..1.1) * k.height as f64;
        let z = rng.random_range(cfg.depth_range[0]..cfg.depth_range[1]);
        let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let c = cam.transform_point(ray * z);
        let s = z / 4.0;
        let axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(cfg.axis_range[0]..=cfg.axis_range[1]) * s);
        let amax = axes.iter().cloned().fold(0.0, f64::max);
        if centers.iter().any(|o| (o - c).norm() < amax + 0.3) {
            continue;
        }
        let base = cfg.palette[rng.random_range(0..cfg.palette.len())];
        let dir: [f64; 3] = UnitSphere.sample(rng);
        out.push(Ellipsoid {
            center: [c.x, c.y, c.z],
            rotation: random_rotation(rng).to_array(),
            axes,
            color: base.map(|b| (b + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)),
            stripe_dir: dir,
            stripe_freq: rng.random_range(cfg.texture_freq[0]..=cfg.texture_freq[1]),
            stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }
    out
}

fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds a full-trajectory scene; every output is a pure function of
/// `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample, SceneError> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    for attempt in 0..cfg.max_retries.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed(seed, attempt));
        let raw = trajectory(&mut rng, cfg);
        let scale = 1.0 / raw.last().unwrap().translation().norm();
        let prims: Vec<Ellipsoid> = place_primitives(&mut rng, cfg, &raw)
            .iter()
            .map(|e| e.scaled(scale))
            .collect();
        let poses: Vec<UnitDualQuat> = raw
            .iter()
            .map(|p| UnitDualQuat::from_rotation_translation(p.rotation(), p.translation() * scale).canonical())
            .collect();
        let views: Vec<RayImage> = poses.iter().map(|p| cast_view(&prims, &k, p, cfg)).collect();
        if views.iter().any(|v| v.coverage() < cfg.min_coverage) {
            log::debug!("seed {seed} attempt {attempt}: coverage too low, retrying");
            continue;
        }
        return Ok(assemble(seed, cfg, k, poses, prims, views));
    }
    Err(SceneError::Coverage {
        seed,
        attempts: cfg.max_retries.max(1),
        min: cfg.min_coverage,
    })
}

fn assemble(
    seed: u64,
    cfg: &SceneConfig,
    k: Intrinsics,
    poses: Vec<UnitDualQuat>,
    prims: Vec<Ellipsoid>,
    views: Vec<RayImage>,
) -> SceneSample {
    let t = poses.len();
    let mut pts = Vec::with_capacity(t * k.width * k.height * 3);
    let mut conf = Vec::with_capacity(t * k.width * k.height);
    for v in &views {
        pts.extend(v.points.iter().flatten());
        conf.extend(v.hit.iter().map(|&h| if h { 1.0 } else { 0.0 }));
    }
    let n = conf.len();
    SceneSample {
        scene_id: seed,
        seed,
        config: cfg.clone(),
        intrinsics: k,
        frames: FrameSequence {
            width: k.width,
            height: k.height,
            images: views.iter().map(|v| v.rgb.clone()).collect(),
            intrinsics: Some(vec![k; t]),
            indices: (0..t).collect(),
        },
        poses: PoseSet::new(poses).expect("trajectory starts at the identity"),
        pointmaps: Tensor::new(vec![n, 3], pts),
        confidence: Tensor::new(vec![n, 1], conf),
        depths: views.into_iter().map(|v| v.depth).collect(),
        targets: Vec::new(),
        primitives: prims,
    }
}

/// Frame indices of a clip: `count` frames `interval` apart from `start`.
pub fn clip_indices(count: usize, interval: usize, start: usize) -> Vec<usize> {
    (0..count).map(|i| start + i * interval).collect()
}

/// Largest valid clip start, or `None` when the span does not fit.
pub fn max_clip_start(len: usize, count: usize, interval: usize) -> Option<usize> {
    let span = (count - 1) * interval;
    (span < len).then(|| len - 1 - span)
}

/// Evenly spaced sub-clip re-expressed relative to its first frame.
/// Frames strictly inside the span that are not inputs become targets.
///
/// Panics when the requested span runs past the trajectory.
pub fn sample_training_clip(scene: &SceneSample, count: usize, interval: usize, start: usize) -> SceneSample {
    assert!(count >= 1 && interval >= 1, "clip needs at least one frame and a positive interval");
    let len = scene.frames.len();
    assert!(
        max_clip_start(len, count, interval).is_some_and(|m| start <= m),
        "clip of {count} frames at interval {interval} from {start} overflows {len} frames"
    );
    let idx = clip_indices(count, interval, start);
    let inv = scene.poses.get(start).conjugate();
    let poses: Vec<UnitDualQuat> = idx.iter().map(|&i| scene.poses.get(i)).collect();
    let poses = PoseSet::canonicalize(&poses);
    let px = scene.pixels();
    let mut pts = Vec::with_capacity(count * px * 3);
    let mut conf = Vec::with_capacity(count * px);
    for &i in &idx {
        for p in i * px..(i + 1) * px {
            let c = scene.confidence.data()[p];
            let v = if c > 0.0 {
                let r = scene.pointmaps.row(p);
                let q = inv.transform_point(Vector3::new(r[0], r[1], r[2]));
                [q.x, q.y, q.z]
            } else {
                [0.0; 3]
            };
            pts.extend(v);
            conf.push(c);
        }
    }
    let last = *idx.last().unwrap();
    let targets = (start + 1..last)
        .filter(|i| !idx.contains(i))
        .map(|i| TargetView {
            index: i,
            image: scene.frames.images[i].clone(),
            pose: inv.mul(scene.poses.get(i)).canonical(),
            depth: scene.depths[i].clone(),
            points: (i * px..(i + 1) * px)
                .flat_map(|p| {
                    if scene.confidence.data()[p] > 0.0 {
                        let r = scene.pointmaps.row(p);
                        let q = inv.transform_point(Vector3::new(r[0], r[1], r[2]));
                        [q.x, q.y, q.z]
                    } else {
                        [0.0; 3]
                    }
                })
                .collect(),
        })
        .collect();
    SceneSample {
        scene_id: scene.scene_id,
        seed: scene.seed,
        config: scene.config.clone(),
        intrinsics: scene.intrinsics,
        frames: scene.frames.select(&idx),
        poses,
        pointmaps: Tensor::new(vec![count * px, 3], pts),
        confidence: Tensor::new(vec![count * px, 1], conf),
        depths: idx.iter().map(|&i| scene.depths[i].clone()).collect(),
        targets,
        primitives: scene.primitives.iter().map(|e| e.transformed(&inv)).collect(),
    }
}

/// Footprint, in pixels, used for oracle splats.
pub const ORACLE_FOOTPRINT: f64 = 0.25;

/// Pixel-aligned Gaussians placed on the true surface points of every
/// input frame (and of every target view when `with_targets`), colored by
/// the observed pixel. Background pixels get no Gaussian. `footprint` is the
/// isotropic standard deviation in pixels.
pub fn oracle_gaussians(sample: &SceneSample, footprint: f64, with_targets: bool) -> GaussianSet {
    let k = sample.intrinsics;
    let px = sample.pixels();
    let mut gs = GaussianSet::new(0);
    let mut add = |frame: usize, depth: &[f64], points: &[f64], image: &[f64]| {
        for p in 0..px {
            if depth[p] <= 0.0 {
                continue;
            }
            let s = footprint * depth[p] / k.fx;
            gs.push(Gaussian {
                center: [points[3 * p], points[3 * p + 1], points[3 * p + 2]],
                opacity: 0.99,
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: [s; 3],
                color: image[3 * p..3 * p + 3].to_vec(),
            });
            gs.provenance.push(Provenance {
                frame: frame as u32,
                pixel: p as u32,
            });
        }
    };
    for t in 0..sample.frames.len() {
        let pts = &sample.pointmaps.data()[3 * t * px..3 * (t + 1) * px];
        add(t, &sample.depths[t], pts, &sample.frames.images[t]);
    }
    if with_targets {
        for (j, tv) in sample.targets.iter().enumerate() {
            add(sample.frames.len() + j, &tv.depth, &tv.points, &tv.image);
        }
    }
    gs
}

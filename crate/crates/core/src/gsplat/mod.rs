//! 3D Gaussian primitives, EWA projection and a differentiable splat
//! renderer.

mod image_io;
mod ply;
mod render;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dualquat::{PoseSE3, UnitDualQuat};
use crate::numerics::gradcheck::uniform;
use crate::numerics::{GradCase, Tape, Tensor, Var};

pub use image_io::{load_rgb, save_depth16, save_rgb, ImageError};
pub use ply::{export_ply, import_ply, PlyError};
pub use render::{color_width, render_vars, CameraVars, SplatVars, ALPHA_MAX, RENDER_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub center: [f64; 3],
    pub opacity: f64,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    /// Color coefficients, `3 (k+1)^2` values, channel-major.
    pub color: Vec<f64>,
}

impl Gaussian {
    pub fn is_valid(&self) -> bool {
        let qn: f64 = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        (qn - 1.0).abs() < 1e-6
            && self.scale.iter().all(|&s| s > 0.0)
            && self.opacity > 0.0
            && self.opacity < 1.0
    }
}

/// Source pixel of a pixel-aligned Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub frame: u32,
    pub pixel: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian>,
    /// Either empty or one entry per Gaussian.
    pub provenance: Vec<Provenance>,
}

/// Column-stacked tensors for a whole set.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatTensors {
    pub means: Tensor,
    pub opacity: Tensor,
    pub quats: Tensor,
    pub scales: Tensor,
    pub colors: Tensor,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Self {
        color_width(sh_degree);
        Self {
            sh_degree,
            gaussians: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.color.len(), color_width(self.sh_degree));
        self.gaussians.push(g);
    }

    pub fn to_tensors(&self) -> SplatTensors {
        let n = self.len();
        let cw = color_width(self.sh_degree);
        let gs = &self.gaussians;
        SplatTensors {
            means: Tensor::new([n, 3], gs.iter().flat_map(|g| g.center).collect()),
            opacity: Tensor::new([n, 1], gs.iter().map(|g| g.opacity).collect()),
            quats: Tensor::new([n, 4], gs.iter().flat_map(|g| g.rotation).collect()),
            scales: Tensor::new([n, 3], gs.iter().flat_map(|g| g.scale).collect()),
            colors: Tensor::new([n, cw], gs.iter().flat_map(|g| g.color.iter().copied()).collect()),
        }
    }

    pub fn from_tensors(t: &SplatTensors) -> Self {
        let n = t.means.rows();
        let cw = t.colors.cols();
        let sh_degree = if cw == 3 { 0 } else { 1 };
        let gaussians = (0..n)
            .map(|i| Gaussian {
                center: t.means.row(i).try_into().unwrap(),
                opacity: t.opacity.data()[i],
                rotation: t.quats.row(i).try_into().unwrap(),
                scale: t.scales.row(i).try_into().unwrap(),
                color: t.colors.row(i).to_vec(),
            })
            .collect();
        Self {
            sh_degree,
            gaussians,
            provenance: Vec::new(),
        }
    }

    /// Applies a rigid motion to every center and orientation.
    pub fn transformed(&self, motion: &UnitDualQuat) -> Self {
        let se3 = motion.to_se3();
        let qm = motion.rotation();
        let mut out = self.clone();
        for g in &mut out.gaussians {
            let c = se3.apply(Vector3::from(g.center));
            g.center = [c.x, c.y, c.z];
            let q = qm.mul(crate::dualquat::Quat::from_array(g.rotation));
            g.rotation = q.to_array();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels with focal length `f` and a centered principal point.
    pub fn centered(f: f64, width: usize, height: usize) -> Self {
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy)
    }

    /// The same camera sampled `factor` times more densely.
    pub fn upsampled(&self, factor: usize) -> Self {
        let k = factor as f64;
        Self {
            fx: self.fx * k,
            fy: self.fy * k,
            cx: self.cx * k,
            cy: self.cy * k,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    /// `(fx/W, fy/H, cx/W, cy/H)`.
    pub fn normalized(&self) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [self.fx / w, self.fy / h, self.cx / w, self.cy / h]
    }

    /// Ray direction (unnormalized, `z = 1`) through a pixel center.
    pub fn ray(&self, px: usize, py: usize) -> Vector3<f64> {
        Vector3::new(
            (px as f64 + 0.5 - self.cx) / self.fx,
            (py as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub extrinsics: PoseSE3,
}

impl CameraModel {
    /// Camera whose camera-to-canonical pose is `pose`.
    pub fn from_pose(intrinsics: Intrinsics, pose: &UnitDualQuat) -> Self {
        Self {
            intrinsics,
            extrinsics: pose.to_se3().inverse(),
        }
    }

    pub fn rotation_tensor(&self) -> Tensor {
        let r = &self.extrinsics.rotation;
        Tensor::from_fn([3, 3], |k| r[(k / 3, k % 3)])
    }

    pub fn translation_tensor(&self) -> Tensor {
        Tensor::new([3], self.extrinsics.translation.iter().copied().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub near: f64,
    /// Added to the diagonal of every 2D covariance.
    pub cov_eps: f64,
    /// Restrict each Gaussian to pixels within this many standard
    /// deviations; `None` evaluates every pixel.
    pub cull_sigma: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            near: 1e-3,
            cov_eps: 1e-6,
            cull_sigma: Some(3.0),
        }
    }
}

/// 2D footprint of a Gaussian seen by a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// EWA projection; `None` when the Gaussian is behind the near plane.
pub fn project(g: &Gaussian, cam: &CameraModel, cfg: &RenderConfig) -> Option<Projection> {
    let e = &cam.extrinsics;
    render::project_one(
        &g.center,
        &g.rotation,
        &g.scale,
        &e.rotation,
        &e.translation,
        &cam.intrinsics,
        cfg,
    )
    .map(|geo| Projection {
        mean: geo.mean,
        cov: geo.cov,
        depth: geo.p.z,
    })
}

/// Row-major planar outputs of a render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H*W*3` interleaved RGB.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn from_tensor(t: &Tensor, width: usize, height: usize) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        let mut alpha = Vec::with_capacity(width * height);
        let mut depth = Vec::with_capacity(width * height);
        for row in t.data().chunks(RENDER_CHANNELS) {
            rgb.extend_from_slice(&row[..3]);
            alpha.push(row[3]);
            depth.push(row[4]);
        }
        Self {
            width,
            height,
            rgb,
            alpha,
            depth,
        }
    }
}

/// Renders a set without recording gradients.
pub fn render(gs: &GaussianSet, cam: &CameraModel, cfg: &RenderConfig) -> RenderOutput {
    let tape = Tape::new();
    let out = render_on_tape(&tape, gs, cam, cfg);
    let t = out.value();
    RenderOutput::from_tensor(&t, cam.intrinsics.width, cam.intrinsics.height)
}

/// Renders a constant set on `tape`, returning the `[H*W, 5]` output.
pub fn render_on_tape<'t>(
    tape: &'t Tape,
    gs: &GaussianSet,
    cam: &CameraModel,
    cfg: &RenderConfig,
) -> Var<'t> {
    let t = gs.to_tensors();
    let splats = SplatVars {
        means: tape.constant(t.means),
        opacity: tape.constant(t.opacity),
        quats: tape.constant(t.quats),
        scales: tape.constant(t.scales),
        colors: tape.constant(t.colors),
    };
    let camera = CameraVars {
        rotation: tape.constant(cam.rotation_tensor()),
        translation: tape.constant(cam.translation_tensor()),
    };
    render_vars(splats, camera, &cam.intrinsics, cfg)
}

/// Compositing weight of every Gaussian that touches each pixel, in
/// front-to-back order.
pub fn composite_weights(gs: &GaussianSet, cam: &CameraModel, cfg: &RenderConfig) -> Vec<Vec<(usize, f64)>> {
    render::pixel_weights(&gs.to_tensors(), &cam.rotation_tensor(), &cam.translation_tensor(), &cam.intrinsics, cfg)
}

/// Box-filters a supersampled interleaved image down by `factor`.
pub fn downsample(src: &[f64], width: usize, height: usize, channels: usize, factor: usize) -> Vec<f64> {
    let (w, h) = (width / factor, height / factor);
    let mut out = vec![0.0; w * h * channels];
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            for dy in 0..factor {
                for dx in 0..factor {
                    let s = ((y * factor + dy) * width + x * factor + dx) * channels;
                    for c in 0..channels {
                        out[(y * w + x) * channels + c] += src[s + c] * norm;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum SplatError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn grad_case_camera() -> CameraModel {
    let rot = crate::dualquat::Quat::from_axis_angle(Vector3::new(0.3, 1.0, 0.1), 0.15);
    let pose = UnitDualQuat::from_rotation_translation(rot, Vector3::new(0.1, -0.05, 0.2));
    CameraModel::from_pose(Intrinsics::centered(6.0, 6, 5), &pose)
}

fn splat_case_inputs(r: &mut rand_chacha::ChaCha8Rng, n: usize, color_cols: usize) -> Vec<Tensor> {
    use rand::Rng;
    // Distinct, well-separated depths keep the per-pixel order fixed under
    // the probe perturbation.
    let mut means = uniform(r, [n, 3], -0.4, 0.4);
    for i in 0..n {
        means.data_mut()[i * 3 + 2] = 3.0 + 0.5 * i as f64 + r.random_range(0.0..0.2);
    }
    let mut quats = uniform(r, [n, 4], -1.0, 1.0);
    for row in quats.data_mut().chunks_mut(4) {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= nrm);
    }
    let cam = grad_case_camera();
    vec![
        means,
        uniform(r, [n, 1], 0.2, 0.8),
        quats,
        uniform(r, [n, 3], 0.15, 0.5),
        uniform(r, [n, color_cols], 0.0, 1.0),
        cam.rotation_tensor(),
        cam.translation_tensor(),
    ]
}

fn splat_case_eval<'t>(x: &[Var<'t>]) -> Var<'t> {
    let cam = grad_case_camera();
    let cfg = RenderConfig {
        background: [0.2, 0.4, 0.1],
        cull_sigma: None,
        ..RenderConfig::default()
    };
    render_vars(
        SplatVars {
            means: x[0],
            opacity: x[1],
            quats: x[2],
            scales: x[3],
            colors: x[4],
        },
        CameraVars {
            rotation: x[5],
            translation: x[6],
        },
        &cam.intrinsics,
        &cfg,
    )
}

/// Gradient-check cases for the renderer.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("render", |r| splat_case_inputs(r, 3, 3), |_, x| splat_case_eval(x)),
        GradCase::new("render_sh1", |r| splat_case_inputs(r, 2, 12), |_, x| splat_case_eval(x)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn iso(center: [f64; 3], s: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            center,
            opacity,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [s; 3],
            color: color.to_vec(),
        }
    }

    #[test]
    fn on_axis_projection_hits_principal_point() {
        let cam = CameraModel {
            intrinsics: Intrinsics::centered(32.0, 32, 32),
            extrinsics: PoseSE3::identity(),
        };
        let p = project(&iso([0.0, 0.0, 1.0], 0.1, 0.5, [1.0; 3]), &cam, &RenderConfig::default()).unwrap();
        assert_abs_diff_eq!(p.mean, Vector2::new(16.0, 16.0), epsilon = 1e-12);
    }

    #[test]
    fn isotropic_footprint_scales_with_focal_over_depth() {
        let cam = CameraModel {
            intrinsics: Intrinsics::centered(32.0, 32, 32),
            extrinsics: PoseSE3::identity(),
        };
        let (sigma, z) = (0.05, 2.0);
        let p = project(&iso([0.0, 0.0, z], sigma, 0.5, [1.0; 3]), &cam, &RenderConfig::default()).unwrap();
        let want = (32.0 * sigma / z).powi(2);
        assert_abs_diff_eq!(p.cov[(0, 0)], want, epsilon = 1e-5);
        assert_abs_diff_eq!(p.cov[(1, 1)], want, epsilon = 1e-5);
        assert_abs_diff_eq!(p.cov[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = CameraModel {
            intrinsics: Intrinsics::centered(32.0, 32, 32),
            extrinsics: PoseSE3::identity(),
        };
        assert!(project(&iso([0.0, 0.0, -1.0], 0.1, 0.5, [1.0; 3]), &cam, &RenderConfig::default()).is_none());
    }

    #[test]
    fn empty_set_renders_background() {
        let cam = CameraModel {
            intrinsics: Intrinsics::centered(8.0, 8, 8),
            extrinsics: PoseSE3::identity(),
        };
        let cfg = RenderConfig {
            background: [0.1, 0.2, 0.3],
            ..RenderConfig::default()
        };
        let out = render(&GaussianSet::new(0), &cam, &cfg);
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        for px in out.rgb.chunks(3) {
            assert_eq!(px, &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn opaque_gaussian_on_pixel_ray_dominates() {
        let intr = Intrinsics::centered(8.0, 8, 8);
        let cam = CameraModel {
            intrinsics: intr,
            extrinsics: PoseSE3::identity(),
        };
        // Center exactly on the ray of pixel (4, 4).
        let ray = intr.ray(4, 4) * 2.0;
        let mut gs = GaussianSet::new(0);
        gs.push(iso([ray.x, ray.y, ray.z], 0.3, ALPHA_MAX, [0.9, 0.5, 0.1]));
        let out = render(&gs, &cam, &RenderConfig::default());
        let p = 4 * 8 + 4;
        assert!(out.alpha[p] >= 0.99 * ALPHA_MAX);
        assert_abs_diff_eq!(out.rgb[p * 3], 0.9 * ALPHA_MAX, epsilon = 1e-9);
    }

    #[test]
    fn renderer_gradients_match_finite_differences() {
        for c in grad_cases() {
            let r = c.check_seeds(0, 10, 1e-5, 1e-4).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}

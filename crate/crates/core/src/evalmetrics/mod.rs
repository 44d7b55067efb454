//! Image and trajectory metrics, evaluation-time pose alignment and the
//! per-scene evaluation driver.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dualquat::{PoseSE3, PoseSet, UnitDualQuat};
use crate::gsplat::{render_vars, CameraModel, CameraVars, GaussianSet, Intrinsics, RenderConfig, SplatVars};
use crate::numerics::{Tape, Tensor};

mod eval;

pub use eval::{evaluate_output, evaluate_scene, mean_rows, AggregateMetrics, EvalOptions, EvalReport, ImageMetrics, SceneRow};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("image shapes differ: {0} vs {1} values")]
    Shape(usize, usize),
    #[error("trajectory lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("final camera translation {0:.3e} is too small to normalize")]
    Degenerate(f64),
    #[error("trajectory is empty")]
    Empty,
}

pub fn mse(image: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    if image.len() != reference.len() || image.is_empty() {
        return Err(EvalError::Shape(image.len(), reference.len()));
    }
    let s: f64 = image.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / image.len() as f64)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(image: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    let m = mse(image, reference)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single-channel `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity of interleaved RGB images with a Gaussian
/// window, averaged over channels. The window shrinks to the largest odd
/// size that fits images smaller than 11 pixels.
pub fn ssim(image: &[f64], reference: &[f64], width: usize, height: usize) -> Result<f64, EvalError> {
    if image.len() != reference.len() {
        return Err(EvalError::Shape(image.len(), reference.len()));
    }
    if image.len() != width * height * 3 || image.is_empty() {
        return Err(EvalError::Shape(image.len(), width * height * 3));
    }
    let mut size = SSIM_WINDOW.min(width).min(height);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ch in 0..3 {
        let a: Vec<f64> = image.iter().skip(ch).step_by(3).copied().collect();
        let b: Vec<f64> = reference.iter().skip(ch).step_by(3).copied().collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (ma, ..) = filter_valid(&a, width, height, &k);
        let (mb, ..) = filter_valid(&b, width, height, &k);
        let (saa, ..) = filter_valid(&prod(&a, &a), width, height, &k);
        let (sbb, ..) = filter_valid(&prod(&b, &b), width, height, &k);
        let (sab, ..) = filter_valid(&prod(&a, &b), width, height, &k);
        let n = ma.len();
        let mut s = 0.0;
        for i in 0..n {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            s += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += s / n as f64;
    }
    Ok(total / 3.0)
}

/// Re-expresses poses relative to the first and scales translations so the
/// last camera sits at unit distance.
pub fn normalize_trajectory(poses: &[UnitDualQuat]) -> Result<PoseSet, EvalError> {
    let canon = PoseSet::canonicalize(poses);
    let last = canon.as_slice().last().ok_or(EvalError::Empty)?;
    let norm = last.translation().norm();
    if !(norm > 1e-8) {
        return Err(EvalError::Degenerate(norm));
    }
    let mut scaled: Vec<UnitDualQuat> = canon
        .iter()
        .map(|p| UnitDualQuat::from_rotation_translation(p.rotation(), p.translation() / norm))
        .collect();
    scaled[0] = UnitDualQuat::IDENTITY;
    Ok(PoseSet::new(scaled).expect("first pose is the identity"))
}

fn check_len(a: &[UnitDualQuat], b: &[UnitDualQuat]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// RMSE of per-frame camera position differences.
pub fn ate(pred: &[UnitDualQuat], gt: &[UnitDualQuat]) -> Result<f64, EvalError> {
    check_len(pred, gt)?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.translation() - g.translation()).norm_squared())
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Per-pair `(translation, rotation degrees)` errors of the consecutive
/// relative motions `(gt_i⁻¹ gt_{i+1})⁻¹ (pred_i⁻¹ pred_{i+1})`.
pub fn rpe_terms(pred: &[UnitDualQuat], gt: &[UnitDualQuat]) -> Result<Vec<(f64, f64)>, EvalError> {
    check_len(pred, gt)?;
    Ok((0..pred.len() - 1)
        .map(|i| {
            let rel = |p: &[UnitDualQuat]| p[i].to_se3().inverse().compose(&p[i + 1].to_se3());
            let d = rel(gt).inverse().compose(&rel(pred));
            (d.translation.norm(), d.angle().to_degrees())
        })
        .collect())
}

/// Consecutive-frame relative pose error: translation RMSE and rotation
/// RMSE in degrees. A single pose gives zeros.
pub fn rpe(pred: &[UnitDualQuat], gt: &[UnitDualQuat]) -> Result<(f64, f64), EvalError> {
    let terms = rpe_terms(pred, gt)?;
    if terms.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = terms.len() as f64;
    let st: f64 = terms.iter().map(|t| t.0 * t.0).sum();
    let sr: f64 = terms.iter().map(|t| t.1 * t.1).sum();
    Ok(((st / n).sqrt(), (sr / n).sqrt()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    #[default]
    None,
    Similarity,
    Photometric,
}

impl std::str::FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "similarity" => Ok(Self::Similarity),
            "photometric" => Ok(Self::Photometric),
            _ => Err(format!("unknown alignment `{s}` (expected none, similarity or photometric)")),
        }
    }
}

/// `x -> s R x + t` mapping predicted camera centers onto ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityFit {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Set when the centers did not determine a rotation and only scale and
    /// translation were fitted.
    pub degenerate: bool,
}

impl SimilarityFit {
    pub fn apply(&self, poses: &[UnitDualQuat]) -> Vec<UnitDualQuat> {
        let r = PoseSE3 {
            rotation: self.rotation,
            translation: Vector3::zeros(),
        };
        poses
            .iter()
            .map(|p| {
                let se = p.to_se3();
                let rot = r.compose(&se).rotation;
                let t = self.scale * self.rotation * se.translation + self.translation;
                UnitDualQuat::from_se3(&PoseSE3 { rotation: rot, translation: t })
            })
            .collect()
    }
}

/// Least-squares similarity between camera centers (Umeyama). Falls back to
/// a scale-and-translation fit when the centers are collinear or fewer than
/// three.
pub fn similarity_fit(pred: &[UnitDualQuat], gt: &[UnitDualQuat]) -> Result<SimilarityFit, EvalError> {
    check_len(pred, gt)?;
    let p: Vec<Vector3<f64>> = pred.iter().map(|q| q.translation()).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|q| q.translation()).collect();
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mg = g.iter().sum::<Vector3<f64>>() / n;
    let var_p: f64 = p.iter().map(|x| (x - mp).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in p.iter().zip(&g) {
        cov += (y - mg) * (x - mp).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let rank2 = p.len() >= 3 && sv[0] > 1e-12 && sv[1] > 1e-9 * sv[0];
    if !rank2 || var_p < 1e-15 {
        let cross: f64 = p.iter().zip(&g).map(|(x, y)| (x - mp).dot(&(y - mg))).sum::<f64>() / n;
        let scale = if var_p > 1e-15 && cross > 0.0 { cross / var_p } else { 1.0 };
        return Ok(SimilarityFit {
            scale,
            rotation: Matrix3::identity(),
            translation: mg - scale * mp,
            degenerate: true,
        });
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let scale = (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_p;
    Ok(SimilarityFit {
        scale,
        rotation,
        translation: mg - scale * rotation * mp,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetricReport {
    /// Normalized units.
    pub ate: f64,
    pub rpe_trans: f64,
    /// RMSE over consecutive pairs, degrees.
    pub rpe_rot: f64,
    pub aligned: bool,
    /// The similarity fit fell back to scale and translation only.
    pub degenerate_fit: bool,
}

/// Normalizes both trajectories, optionally applies a similarity fit, and
/// reports ATE and RPE.
pub fn pose_metrics(pred: &[UnitDualQuat], gt: &[UnitDualQuat], similarity: bool) -> Result<PoseMetricReport, EvalError> {
    check_len(pred, gt)?;
    let p = normalize_trajectory(pred)?;
    let g = normalize_trajectory(gt)?;
    let (aligned, degenerate_fit) = if similarity {
        let fit = similarity_fit(p.as_slice(), g.as_slice())?;
        (fit.apply(p.as_slice()), fit.degenerate)
    } else {
        (p.as_slice().to_vec(), false)
    };
    let (rpe_trans, rpe_rot) = rpe(&aligned, g.as_slice())?;
    Ok(PoseMetricReport {
        ate: ate(&aligned, g.as_slice())?,
        rpe_trans,
        rpe_rot,
        aligned: similarity,
        degenerate_fit,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotoAlignConfig {
    pub iterations: usize,
    /// Initial step on the gradient.
    pub step: f64,
}

impl Default for PhotoAlignConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            step: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoAlignResult {
    /// Refined camera-to-canonical pose.
    pub pose: UnitDualQuat,
    /// Image MSE before the first and after every accepted step.
    pub history: Vec<f64>,
}

fn skew_grad(g: &Matrix3<f64>, r: &Matrix3<f64>) -> Vector3<f64> {
    let m = g * r.transpose();
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Refines a camera pose against a target image by gradient descent with
/// backtracking, keeping the splats frozen. Accepted steps never increase
/// the image error.
pub fn photometric_align(
    gs: &GaussianSet,
    target: &[f64],
    intr: &Intrinsics,
    init: &UnitDualQuat,
    render_cfg: &RenderConfig,
    cfg: &PhotoAlignConfig,
) -> PhotoAlignResult {
    let t = gs.to_tensors();
    let n_px = intr.width * intr.height;
    assert_eq!(target.len(), 3 * n_px, "target image size");
    let target_t = Tensor::new(vec![n_px, 3], target.to_vec());
    let eval = |cam: &PoseSE3, grad: bool| -> (f64, Matrix3<f64>, Vector3<f64>) {
        let tape = Tape::new();
        let splats = SplatVars {
            means: tape.constant(t.means.clone()),
            opacity: tape.constant(t.opacity.clone()),
            quats: tape.constant(t.quats.clone()),
            scales: tape.constant(t.scales.clone()),
            colors: tape.constant(t.colors.clone()),
        };
        let rot = tape.leaf(Tensor::from_fn([3, 3], |k| cam.rotation[(k / 3, k % 3)]));
        let tr = tape.leaf(Tensor::new([3], cam.translation.iter().copied().collect()));
        let img = render_vars(splats, CameraVars { rotation: rot, translation: tr }, intr, render_cfg).slice_cols(0, 3);
        let loss = img.sub(tape.constant(target_t.clone())).square().mean();
        let value = loss.item();
        if !grad {
            return (value, Matrix3::zeros(), Vector3::zeros());
        }
        let g = tape.backward(loss).expect("finite render");
        let gr = g.wrt(rot).map(|v| Matrix3::from_row_slice(v)).unwrap_or_else(Matrix3::zeros);
        let gt = g.wrt(tr).map(Vector3::from_row_slice).unwrap_or_else(Vector3::zeros);
        (value, gr, gt)
    };

    let mut cam = CameraModel::from_pose(*intr, init).extrinsics;
    let (mut loss, mut gr, mut gt) = eval(&cam, true);
    let mut history = vec![loss];
    let mut step = cfg.step;
    for _ in 0..cfg.iterations {
        let gw = skew_grad(&gr, &cam.rotation);
        let norm = (gw.norm_squared() + gt.norm_squared()).sqrt();
        if !(norm > 0.0) {
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let dw = -step * gw / norm;
            let dt = -step * gt / norm;
            let trial = PoseSE3 {
                rotation: Rotation3::new(dw).into_inner() * cam.rotation,
                translation: cam.translation + dt,
            };
            let (l, ..) = eval(&trial, false);
            if l < loss {
                cam = trial;
                accepted = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        (loss, gr, gt) = eval(&cam, true);
        history.push(loss);
    }
    PhotoAlignResult {
        pose: UnitDualQuat::from_se3(&cam.inverse()),
        history,
    }
}

/// Area under the ROC curve of `scores` separating `true` labels from
/// `false`, with ties counted half. `None` if either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Sum of average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * (i..=j).filter(|&k| labels[idx[k]]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    /// Mean point distance over surface pixels, in scene units.
    pub point_error: f64,
    /// `point_error` divided by the scene extent.
    pub point_error_frac: f64,
    /// How well confidence ranks surface above background pixels.
    pub confidence_auc: Option<f64>,
}

/// Scores a predicted point map `[N, 3]` and confidence `[N, 1]` against a
/// clip's ground truth, both in its canonical frame.
pub fn distill_metrics(pointmap: &Tensor, confidence: &Tensor, clip: &crate::scenegen::SceneSample) -> DistillMetrics {
    let hit: Vec<bool> = clip.confidence.data().iter().map(|&c| c > 0.0).collect();
    let (mut err, mut n) = (0.0, 0usize);
    for (i, &h) in hit.iter().enumerate() {
        if h {
            let (p, g) = (pointmap.row(i), clip.pointmaps.row(i));
            err += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
            n += 1;
        }
    }
    let point_error = if n > 0 { err / n as f64 } else { 0.0 };
    let extent = clip.extent();
    DistillMetrics {
        point_error,
        point_error_frac: if extent > 0.0 { point_error / extent } else { f64::INFINITY },
        confidence_auc: auc(confidence.data(), &hit),
    }
}

#[cfg(test)]
mod tests;

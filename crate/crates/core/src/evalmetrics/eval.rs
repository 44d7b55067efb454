use serde::{Deserialize, Serialize};

use super::{photometric_align, pose_metrics, psnr, ssim, AlignMode, PhotoAlignConfig, PoseMetricReport};
use crate::gsplat::{render, CameraModel, RenderConfig};
use crate::model::{Model, ModelError, ModelOutput, Phase};
use crate::numerics::ParamStore;
use crate::scenegen::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub align: AlignMode,
    pub render: RenderConfig,
    pub photometric: PhotoAlignConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            align: AlignMode::None,
            render: RenderConfig::default(),
            photometric: PhotoAlignConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Absent unless a perceptual backend is configured.
    pub lpips: Option<f64>,
    pub views: usize,
}

impl ImageMetrics {
    fn mean(rows: &[(f64, f64)]) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.1).sum::<f64>() / n,
            lpips: None,
            views: rows.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_seed: u64,
    pub views: usize,
    /// Held-out views between the inputs.
    pub target: ImageMetrics,
    /// Reconstructions of the input views themselves.
    pub input: ImageMetrics,
    pub pose: Option<PoseMetricReport>,
    /// Why pose metrics are missing, if they are.
    pub pose_error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    /// Averaged over rows that had held-out views.
    pub target_psnr: f64,
    pub target_ssim: f64,
    pub target_scenes: usize,
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub ate: Option<f64>,
    pub rpe_trans: Option<f64>,
    pub rpe_rot: Option<f64>,
    /// Rows that contributed pose metrics.
    pub pose_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub views: usize,
    pub align: AlignMode,
    /// Pose errors are RMSE over frames (ATE) and consecutive pairs (RPE).
    pub aggregation: String,
    pub rows: Vec<SceneRow>,
    pub mean: AggregateMetrics,
}

impl EvalReport {
    pub fn new(config_digest: String, views: usize, align: AlignMode, rows: Vec<SceneRow>) -> Self {
        Self {
            config_digest,
            views,
            align,
            aggregation: "rmse".into(),
            mean: mean_rows(&rows),
            rows,
        }
    }
}

pub fn mean_rows(rows: &[SceneRow]) -> AggregateMetrics {
    let n = rows.len().max(1) as f64;
    let poses: Vec<&PoseMetricReport> = rows.iter().filter_map(|r| r.pose.as_ref()).collect();
    let pm = |f: fn(&PoseMetricReport) -> f64| {
        (!poses.is_empty()).then(|| poses.iter().map(|p| f(p)).sum::<f64>() / poses.len() as f64)
    };
    let with_targets: Vec<&SceneRow> = rows.iter().filter(|r| r.target.views > 0).collect();
    let nt = with_targets.len().max(1) as f64;
    AggregateMetrics {
        target_psnr: with_targets.iter().map(|r| r.target.psnr).sum::<f64>() / nt,
        target_ssim: with_targets.iter().map(|r| r.target.ssim).sum::<f64>() / nt,
        target_scenes: with_targets.len(),
        input_psnr: rows.iter().map(|r| r.input.psnr).sum::<f64>() / n,
        input_ssim: rows.iter().map(|r| r.input.ssim).sum::<f64>() / n,
        ate: pm(|p| p.ate),
        rpe_trans: pm(|p| p.rpe_trans),
        rpe_rot: pm(|p| p.rpe_rot),
        pose_scenes: poses.len(),
    }
}

/// Runs the model on a clip and scores it with [`evaluate_output`].
pub fn evaluate_scene(model: &Model, store: &ParamStore, clip: &SceneSample, opts: &EvalOptions) -> Result<SceneRow, ModelError> {
    let out = model.predict(store, &clip.frames, Phase::Nvs)?;
    Ok(evaluate_output(&out, clip, opts))
}

/// Scores rendered target and input views against ground truth, plus the
/// predicted trajectory.
pub fn evaluate_output(out: &ModelOutput, clip: &SceneSample, opts: &EvalOptions) -> SceneRow {
    let k = clip.intrinsics;
    let score = |img: &[f64], gt: &[f64]| {
        (
            psnr(img, gt).expect("matched sizes"),
            ssim(img, gt, k.width, k.height).expect("matched sizes"),
        )
    };
    let mut targets = Vec::new();
    for t in &clip.targets {
        let pose = match opts.align {
            AlignMode::Photometric => {
                photometric_align(&out.gaussians, &t.image, &k, &t.pose, &opts.render, &opts.photometric).pose
            }
            _ => t.pose,
        };
        let img = render(&out.gaussians, &CameraModel::from_pose(k, &pose), &opts.render).rgb;
        targets.push(score(&img, &t.image));
    }
    let inputs: Vec<(f64, f64)> = clip
        .frames
        .images
        .iter()
        .zip(clip.poses.iter())
        .map(|(gt, pose)| score(&render(&out.gaussians, &CameraModel::from_pose(k, pose), &opts.render).rgb, gt))
        .collect();
    let (pose, pose_error) = if clip.poses.len() < 2 {
        (None, Some("single view".to_string()))
    } else {
        match pose_metrics(out.poses.as_slice(), clip.poses.as_slice(), opts.align != AlignMode::None) {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    SceneRow {
        scene_seed: clip.seed,
        views: clip.frames.len(),
        target: ImageMetrics::mean(&targets),
        input: ImageMetrics::mean(&inputs),
        pose,
        pose_error,
    }
}

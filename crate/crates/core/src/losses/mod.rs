//! Training objectives: photometric, point-map distillation and camera
//! losses, and their weighted total.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dualquat::{camera_terms, quat_trans_loss, UnitDualQuat, QUAT_TRANS_WIDTH};
use crate::gsplat::{render_vars, CameraModel, CameraVars, Intrinsics, RenderConfig, SplatVars};
use crate::model::{ModelVars, Phase};
use crate::numerics::gradcheck::uniform;
use crate::numerics::{GradCase, Tape, Tensor, Var};
use crate::scenegen::{SceneConfig, SceneSample};

pub const IMG_MSE: &str = "img_mse";
pub const IMG_PERCEPTUAL: &str = "img_perceptual";
pub const CAMERA_MSE: &str = "camera_mse";
pub const CAMERA_ALIGN: &str = "camera_align";
pub const DISTILL_POINT: &str = "distill_point";
pub const DISTILL_CONF: &str = "distill_conf";
pub const COMPONENTS: [&str; 6] = [IMG_MSE, IMG_PERCEPTUAL, CAMERA_MSE, CAMERA_ALIGN, DISTILL_POINT, DISTILL_CONF];

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{what}: shape {got:?} does not match {want:?}")]
    Shape {
        what: &'static str,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing {0}")]
    Missing(&'static str),
}

fn check_shape(what: &'static str, got: &[usize], want: &[usize]) -> Result<(), LossError> {
    if got == want {
        Ok(())
    } else {
        Err(LossError::Shape {
            what,
            want: want.to_vec(),
            got: got.to_vec(),
        })
    }
}

/// A differentiable image-pair distance, for example a learned perceptual
/// metric. Images are `[H*W, 3]` rows in row-major pixel order.
pub trait Perceptual {
    fn distance<'t>(&self, rendered: Var<'t>, target: Var<'t>, width: usize, height: usize) -> Var<'t>;
}

/// Mean absolute difference of horizontal image gradients. A cheap,
/// differentiable stand-in where no learned perceptual metric is available.
#[derive(Clone, Copy, Debug, Default)]
pub struct EdgeDistance;

impl Perceptual for EdgeDistance {
    fn distance<'t>(&self, rendered: Var<'t>, target: Var<'t>, width: usize, height: usize) -> Var<'t> {
        let left: Rc<Vec<usize>> = Rc::new((0..height).flat_map(|y| (0..width - 1).map(move |x| y * width + x)).collect());
        let right: Rc<Vec<usize>> = Rc::new(left.iter().map(|i| i + 1).collect());
        let grad = |v: Var<'t>| v.gather_rows(right.clone()).sub(v.gather_rows(left.clone()));
        grad(rendered).sub(grad(target)).abs().mean()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub image: f64,
    /// Applied only when a perceptual backend is supplied.
    pub perceptual: f64,
    /// Weight of the camera loss, `λ`.
    pub camera: f64,
    /// Include the dual-quaternion alignment term in the camera loss.
    pub camera_align: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 1.0,
            perceptual: 0.05,
            camera: 0.1,
            camera_align: true,
        }
    }
}

/// Image loss terms, unweighted.
#[derive(Clone, Copy)]
pub struct PhotoTerms<'t> {
    pub mse: Var<'t>,
    pub perceptual: Option<Var<'t>>,
}

/// MSE (and the perceptual distance, if any) between `[H*W, 3]` images.
pub fn photometric_loss<'t>(
    rendered: Var<'t>,
    target: Var<'t>,
    width: usize,
    height: usize,
    perceptual: Option<&dyn Perceptual>,
) -> Result<PhotoTerms<'t>, LossError> {
    check_shape("target image", &target.shape(), &[width * height, 3])?;
    check_shape("rendered image", &rendered.shape(), &[width * height, 3])?;
    Ok(PhotoTerms {
        mse: rendered.sub(target).square().mean(),
        perceptual: perceptual.map(|p| p.distance(rendered, target, width, height)),
    })
}

/// Teacher point map: per-pixel points in the camera frame of view
/// `reference`, with confidences and a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    /// `[N, 3]`.
    pub points: Tensor,
    /// `[N, 1]`, non-negative.
    pub confidence: Tensor,
    pub valid: Vec<bool>,
    pub reference: usize,
}

impl PointMap {
    /// Ground-truth map of a sample's input frames in its canonical frame.
    /// Background pixels stay valid with zero confidence.
    pub fn from_sample(sample: &SceneSample) -> Self {
        Self {
            points: sample.pointmaps.clone(),
            confidence: sample.confidence.clone(),
            valid: vec![true; sample.confidence.rows()],
            reference: 0,
        }
    }
}

/// Predicted point map on the tape.
#[derive(Clone, Copy)]
pub struct PointMapVars<'t> {
    pub points: Var<'t>,
    /// Strictly positive.
    pub confidence: Var<'t>,
    pub reference: usize,
}

#[derive(Clone, Copy)]
pub struct DistillTerms<'t> {
    pub point: Var<'t>,
    pub conf: Var<'t>,
}

/// `Σ C̄ ‖Z − Z̄‖₂ + |C − C̄|` over valid pixels. The teacher enters as
/// constants and receives no gradient.
///
/// # Panics
/// If the two maps are expressed in different reference frames.
pub fn distill_loss<'t>(pred: PointMapVars<'t>, teacher: &PointMap) -> Result<DistillTerms<'t>, LossError> {
    assert_eq!(
        pred.reference, teacher.reference,
        "point maps are in different reference frames"
    );
    let n = teacher.valid.len();
    check_shape("teacher points", teacher.points.shape(), &[n, 3])?;
    check_shape("teacher confidence", teacher.confidence.shape(), &[n, 1])?;
    check_shape("predicted points", &pred.points.shape(), &[n, 3])?;
    check_shape("predicted confidence", &pred.confidence.shape(), &[n, 1])?;
    let tape = pred.points.tape();
    let idx: Vec<usize> = (0..n).filter(|&i| teacher.valid[i]).collect();
    if idx.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok(DistillTerms { point: z, conf: z });
    }
    let pick = |t: &Tensor, c: usize| Tensor::new(vec![idx.len(), c], idx.iter().flat_map(|&i| t.row(i).to_vec()).collect());
    let z_bar = tape.constant(pick(&teacher.points, 3));
    let c_bar = tape.constant(pick(&teacher.confidence, 1));
    let rows = Rc::new(idx);
    let z = pred.points.gather_rows(rows.clone());
    let c = pred.confidence.gather_rows(rows);
    Ok(DistillTerms {
        point: z.sub(z_bar).row_norm().mul(c_bar).sum(),
        conf: c.sub(c_bar).abs().sum(),
    })
}

/// Which views the image loss renders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageViews {
    /// Input frames and held-out targets.
    #[default]
    All,
    Inputs,
    Targets,
}

pub struct LossContext<'a> {
    pub weights: LossWeights,
    pub render: RenderConfig,
    pub views: ImageViews,
    pub perceptual: Option<&'a dyn Perceptual>,
}

impl LossContext<'_> {
    /// Renders against the scene's background color.
    pub fn for_scene(cfg: &SceneConfig, weights: LossWeights) -> Self {
        Self {
            weights,
            render: RenderConfig {
                background: cfg.background,
                ..RenderConfig::default()
            },
            views: ImageViews::All,
            perceptual: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub phase: Phase,
    /// Unweighted values of every component; inactive ones are zero.
    pub components: BTreeMap<String, f64>,
    /// Weight each component enters the total with.
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    /// Weighted sum of the components.
    pub fn resum(&self) -> f64 {
        self.components.iter().map(|(k, v)| self.weights[k] * v).sum()
    }

    pub fn get(&self, name: &str) -> f64 {
        self.components[name]
    }
}

/// Renders splats from a camera-to-canonical `pose` into `[H*W, 5]`.
pub fn render_view<'t>(
    tape: &'t Tape,
    splats: SplatVars<'t>,
    intr: &Intrinsics,
    pose: &UnitDualQuat,
    cfg: &RenderConfig,
) -> Var<'t> {
    let cam = CameraModel::from_pose(*intr, pose);
    let camera = CameraVars {
        rotation: tape.constant(cam.rotation_tensor()),
        translation: tape.constant(cam.translation_tensor()),
    };
    render_vars(splats, camera, intr, cfg)
}

/// Phase-dependent training loss for a predicted sample.
pub fn total_loss<'t>(
    out: &ModelVars<'t>,
    sample: &SceneSample,
    phase: Phase,
    ctx: &LossContext,
) -> Result<(Var<'t>, LossReport), LossError> {
    let tape = out.means.tape();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let mut terms: BTreeMap<&str, (Var<'t>, f64)> = COMPONENTS.iter().map(|&k| (k, (zero(), 0.0))).collect();

    match phase {
        Phase::Distill => {
            let (points, confidence) = out
                .pointmap
                .zip(out.confidence)
                .ok_or(LossError::Missing("distillation heads"))?;
            let d = distill_loss(
                PointMapVars {
                    points,
                    confidence,
                    reference: 0,
                },
                &PointMap::from_sample(sample),
            )?;
            terms.insert(DISTILL_POINT, (d.point, 1.0));
            terms.insert(DISTILL_CONF, (d.conf, 1.0));
        }
        Phase::Nvs => {
            let k = &sample.intrinsics;
            let (w, h) = (k.width, k.height);
            let mut views: Vec<(&[f64], UnitDualQuat)> = Vec::new();
            if ctx.views != ImageViews::Targets {
                views.extend(sample.frames.images.iter().zip(sample.poses.iter()).map(|(im, p)| (im.as_slice(), *p)));
            }
            if ctx.views != ImageViews::Inputs {
                views.extend(sample.targets.iter().map(|t| (t.image.as_slice(), t.pose)));
            }
            if views.is_empty() {
                return Err(LossError::Missing("views for the image loss"));
            }
            let scale = 1.0 / views.len() as f64;
            let mut mse = Vec::new();
            let mut perc = Vec::new();
            for (img, pose) in views {
                let rendered = render_view(tape, out.splats(), k, &pose, &ctx.render).slice_cols(0, 3);
                let target = tape.constant(Tensor::new(vec![w * h, 3], img.to_vec()));
                let t = photometric_loss(rendered, target, w, h, ctx.perceptual)?;
                mse.push(t.mse);
                perc.extend(t.perceptual);
            }
            let avg = |v: Vec<Var<'t>>| v.into_iter().reduce(|a, b| a.add(b)).map(|s| s.scale(scale));
            terms.insert(IMG_MSE, (avg(mse).unwrap(), ctx.weights.image));
            if let Some(p) = avg(perc) {
                terms.insert(IMG_PERCEPTUAL, (p, ctx.weights.perceptual));
            }

            if sample.poses.len() > 1 {
                let cam = out.camera.ok_or(LossError::Missing("camera head output"))?;
                let width = cam.shape()[1];
                if width == QUAT_TRANS_WIDTH {
                    terms.insert(CAMERA_MSE, (quat_trans_loss(cam, &sample.poses), ctx.weights.camera));
                } else {
                    check_shape("camera rows", &cam.shape(), &[sample.poses.len() - 1, 8])?;
                    let c = camera_terms(cam, &sample.poses);
                    terms.insert(CAMERA_MSE, (c.mse, ctx.weights.camera));
                    let w = if ctx.weights.camera_align { ctx.weights.camera } else { 0.0 };
                    terms.insert(CAMERA_ALIGN, (c.align, w));
                }
            }
        }
    }

    let total = terms
        .values()
        .filter(|(_, w)| *w != 0.0)
        .map(|(v, w)| v.scale(*w))
        .reduce(|a, b| a.add(b))
        .unwrap_or_else(zero);
    let report = LossReport {
        total: total.value().data()[0],
        phase,
        components: terms.iter().map(|(k, (v, _))| (k.to_string(), v.value().data()[0])).collect(),
        weights: terms.iter().map(|(k, (_, w))| (k.to_string(), *w)).collect(),
    };
    Ok((total, report))
}

/// Gradient-check cases for the image and distillation losses.
pub fn grad_cases() -> Vec<GradCase> {
    let photo = GradCase::new(
        "photometric_with_perceptual",
        |rng| (0..2).map(|_| uniform(rng, [12, 3], 0.0, 1.0)).collect(),
        |_, xs| {
            let t = photometric_loss(xs[0], xs[1], 4, 3, Some(&EdgeDistance)).unwrap();
            t.mse.add(t.perceptual.unwrap().scale(0.05))
        },
    );
    let distill = GradCase::new(
        "distill",
        |rng| vec![uniform(rng, [6, 3], -1.0, 1.0), uniform(rng, [6, 1], 0.1, 2.0)],
        |_, xs| {
            let teacher = PointMap {
                points: Tensor::new(vec![6, 3], (0..6).flat_map(|i| [0.1 * i as f64, -0.2, 2.0]).collect()),
                confidence: Tensor::new(vec![6, 1], vec![1.0, 0.0, 0.5, 2.0, 1.5, 0.25]),
                valid: vec![true; 6],
                reference: 0,
            };
            let pred = PointMapVars {
                points: xs[0],
                confidence: xs[1],
                reference: 0,
            };
            let d = distill_loss(pred, &teacher).unwrap();
            d.point.add(d.conf)
        },
    );
    vec![photo, distill]
}

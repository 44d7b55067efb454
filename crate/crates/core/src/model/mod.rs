//! The feed-forward predictor: per-frame encoder, decoder stack with camera
//! tokens, and pixel-aligned prediction heads.

mod checkpoint;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    self_attention_residual, AttnWeights, BlockConfig, BlockContext, BlockFlags, DecoderBlock, RopeConfig,
    TokenVars,
};
use crate::dualquat::{PoseSet, Quat, UnitDualQuat, QUAT_TRANS_WIDTH};
use crate::gsplat::{color_width, Gaussian, GaussianSet, Intrinsics, Provenance, SplatVars};
use crate::nn::{Binder, FeedForward, Init, LayerNorm, Linear};
use crate::numerics::{AttnPattern, ParamId, ParamStore, RopeTable, Tape, Tensor, Var};
use crate::scenegen::FrameSequence;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const LOG_SCALE_MIN: f64 = -10.0;
pub const LOG_SCALE_MAX: f64 = 3.0;
/// Camera head width with the dual-quaternion parameterization.
pub const DQ_WIDTH: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Distill,
    #[default]
    Nvs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelFlags {
    pub intrinsics: bool,
    pub modulation: bool,
    pub cna: bool,
    pub causal_mask: bool,
    /// Dual-quaternion camera head; otherwise quaternion plus translation.
    pub dq_param: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            intrinsics: true,
            modulation: true,
            cna: true,
            causal_mask: true,
            dq_param: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Token width `C`.
    pub dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub sh_degree: usize,
    pub max_views: usize,
    pub flags: ModelFlags,
    pub rope_base: f64,
    /// Depth along each pixel ray that centers start from.
    pub depth_prior: f64,
    /// Focal length assumed when frames carry no intrinsics.
    pub default_focal: f64,
    /// Initial splat standard deviation, in pixels at the prior depth.
    pub footprint_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            dim: 64,
            encoder_depth: 2,
            decoder_depth: 2,
            heads: 4,
            ffn_mult: 4,
            sh_degree: 0,
            max_views: 8,
            flags: ModelFlags::default(),
            rope_base: 100.0,
            depth_prior: 4.0,
            default_focal: 32.0,
            footprint_prior: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} is not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || (self.dim / self.heads) % 4 != 0 {
            return bad(format!("dim {} must split into {} heads of a multiple of 4", self.dim, self.heads));
        }
        if self.sh_degree > 1 {
            return bad(format!("sh_degree {} unsupported", self.sh_degree));
        }
        if self.max_views == 0 {
            return bad("max_views must be positive".into());
        }
        if self.depth_prior <= 0.0 || self.default_focal <= 0.0 || self.footprint_prior <= 0.0 {
            return bad("priors must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let g = self.grid();
        g.0 * g.1
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn camera_width(&self) -> usize {
        if self.flags.dq_param {
            DQ_WIDTH
        } else {
            QUAT_TRANS_WIDTH
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            width: self.dim,
            heads: self.heads,
            ffn_hidden: self.ffn_mult * self.dim,
            rope: RopeConfig { base: self.rope_base },
            neighbor_order: Default::default(),
            flags: BlockFlags {
                modulation: self.flags.modulation,
                cna: self.flags.cna,
                causal_mask: self.flags.causal_mask,
            },
        }
    }

    fn intrinsics_for(&self, frames: &FrameSequence, t: usize) -> Intrinsics {
        match &frames.intrinsics {
            Some(k) => k[t],
            None => Intrinsics::centered(self.default_focal, self.width, self.height),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: AttnWeights,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), cfg.dim),
            attn: AttnWeights::new(store, &format!("{name}.attn"), cfg.dim, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), cfg.dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.ffn_mult * cfg.dim, rng),
        }
    }

    fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>, pattern: &Rc<AttnPattern>, rope: &Rc<RopeTable>, heads: usize) -> Var<'t> {
        let x = self_attention_residual(p, &self.attn_norm, &self.attn, x, pattern, rope, heads);
        x.add(self.ffn.forward(p, self.ffn_norm.forward(p, x)))
    }
}

/// Per-pixel prediction heads, each a per-token linear map followed by a
/// pixel unshuffle.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub center: Linear,
    pub opacity: Linear,
    pub rotation: Linear,
    pub scale: Linear,
    pub color: Linear,
    pub camera: Linear,
    pub pointmap: Linear,
    pub confidence: Linear,
}

/// On-tape model outputs. Per-pixel rows are ordered frame, row, column.
#[derive(Clone, Copy)]
pub struct ModelVars<'t> {
    pub frames: usize,
    pub means: Var<'t>,
    pub opacity: Var<'t>,
    pub quats: Var<'t>,
    pub scales: Var<'t>,
    pub colors: Var<'t>,
    /// Normalized camera rows for frames `2..T`; `None` for a single frame.
    pub camera: Option<Var<'t>>,
    pub pointmap: Option<Var<'t>>,
    pub confidence: Option<Var<'t>>,
}

impl<'t> ModelVars<'t> {
    pub fn splats(&self) -> SplatVars<'t> {
        SplatVars {
            means: self.means,
            opacity: self.opacity,
            quats: self.quats,
            scales: self.scales,
            colors: self.colors,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub gaussians: GaussianSet,
    pub poses: PoseSet,
    /// `[T * H * W, 3]`, distillation phase only.
    pub pointmap: Option<Tensor>,
    /// `[T * H * W, 1]`, distillation phase only.
    pub confidence: Option<Tensor>,
}

/// Pose from one camera-head row in either parameterization.
pub fn pose_from_row(row: &[f64]) -> UnitDualQuat {
    if row.len() == DQ_WIDTH {
        UnitDualQuat::from_raw(row.try_into().unwrap()).expect("normalized camera row")
    } else {
        let q = Quat::new(row[0], row[1], row[2], row[3]);
        let q = q.scale(1.0 / q.norm());
        UnitDualQuat::from_rotation_translation(q, nalgebra::Vector3::new(row[4], row[5], row[6])).canonical()
    }
}

impl ModelVars<'_> {
    pub fn to_output(&self, sh_degree: usize, pixels: usize) -> ModelOutput {
        let (m, o, q, s, c) = (
            self.means.value(),
            self.opacity.value(),
            self.quats.value(),
            self.scales.value(),
            self.colors.value(),
        );
        let mut gs = GaussianSet::new(sh_degree);
        for i in 0..m.rows() {
            gs.push(Gaussian {
                center: m.row(i).try_into().unwrap(),
                opacity: o.data()[i],
                rotation: q.row(i).try_into().unwrap(),
                scale: s.row(i).try_into().unwrap(),
                color: c.row(i).to_vec(),
            });
            gs.provenance.push(Provenance {
                frame: (i / pixels) as u32,
                pixel: (i % pixels) as u32,
            });
        }
        let mut poses = vec![UnitDualQuat::IDENTITY];
        if let Some(cam) = self.camera {
            let cam = cam.value();
            poses.extend((0..cam.rows()).map(|r| pose_from_row(cam.row(r))));
        }
        ModelOutput {
            gaussians: gs,
            poses: PoseSet::new(poses).expect("first pose is the identity"),
            pointmap: self.pointmap.map(|v| v.to_tensor()),
            confidence: self.confidence.map(|v| v.to_tensor()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub intrinsics_embed: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: LayerNorm,
    pub camera_token: ParamId,
    pub camera_pos: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub heads: Heads,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.01, 0.99);
    (p / (1.0 - p)).ln()
}

impl Model {
    /// Registers all parameters in `store`. Parameter names are stable, so a
    /// model built from the same config can load any checkpoint of it.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.dim;
        let s2 = config.patch * config.patch;
        let l = config.tokens_per_frame();
        let bc = config.block_config();
        let patch_embed = Linear::new(store, "patch_embed", 3 * s2, c, Init::Xavier, rng);
        let pos_embed = store.add("pos_embed", crate::nn::init_tensor(rng, [l, c], Init::Normal(0.02)));
        let intrinsics_embed = Linear::new(store, "intrinsics_embed", 4, c, Init::Normal(0.02), rng);
        let encoder = (0..config.encoder_depth)
            .map(|i| EncoderBlock::new(store, &format!("encoder.{i}"), &config, rng))
            .collect();
        let encoder_norm = LayerNorm::new(store, "encoder_norm", c);
        let camera_token = store.add("camera_token", crate::nn::init_tensor(rng, [1, c], Init::Normal(0.02)));
        let camera_pos = store.add(
            "camera_pos",
            crate::nn::init_tensor(rng, [config.max_views, c], Init::Normal(0.02)),
        );
        let decoder = (0..config.decoder_depth)
            .map(|i| DecoderBlock::new(store, &format!("decoder.{i}"), &bc, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "final_norm", c);
        let head = Init::Normal(0.01);
        let cw = color_width(config.sh_degree);
        let heads = Heads {
            center: Linear::new(store, "head.center", c, s2 * 3, head, rng),
            opacity: Linear::new(store, "head.opacity", c, s2, head, rng),
            rotation: Linear::new(store, "head.rotation", c, s2 * 4, head, rng),
            scale: Linear::new(store, "head.scale", c, s2 * 3, head, rng),
            color: Linear::new(store, "head.color", c, s2 * cw, Init::Zeros, rng),
            camera: Linear::new(store, "head.camera", c, config.camera_width(), head, rng),
            pointmap: Linear::new(store, "head.pointmap", c, s2 * 3, head, rng),
            confidence: Linear::new(store, "head.confidence", c, s2, head, rng),
        };
        // Camera rows start at the identity pose.
        store.value_mut(heads.camera.b).data_mut()[0] = 1.0;
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            intrinsics_embed,
            encoder,
            encoder_norm,
            camera_token,
            camera_pos,
            decoder,
            final_norm,
            heads,
        })
    }

    pub fn check_input(&self, frames: &FrameSequence) -> Result<(), ModelError> {
        let c = &self.config;
        if frames.is_empty() {
            return Err(ModelError::Input("no frames".into()));
        }
        if frames.len() > c.max_views {
            return Err(ModelError::Input(format!(
                "{} views exceed the model's max_views = {}",
                frames.len(),
                c.max_views
            )));
        }
        if (frames.width, frames.height) != (c.width, c.height) {
            return Err(ModelError::Input(format!(
                "frames are {}x{}, model expects {}x{}",
                frames.width, frames.height, c.width, c.height
            )));
        }
        if frames.images.iter().any(|im| im.len() != 3 * c.pixels()) {
            return Err(ModelError::Input("frame buffer size mismatch".into()));
        }
        if frames.intrinsics.as_ref().is_some_and(|k| k.len() != frames.len()) {
            return Err(ModelError::Input("one intrinsics entry per frame required".into()));
        }
        Ok(())
    }

    /// `[T * L, 3 s^2]` patches, channels ordered `(dy, dx, rgb)`, centered
    /// at zero.
    fn patchify(&self, frames: &FrameSequence) -> Tensor {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let s = c.patch;
        let mut data = Vec::with_capacity(frames.len() * c.pixels() * 3);
        for img in &frames.images {
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..s {
                        let row = (py * s + dy) * c.width + px * s;
                        data.extend(img[3 * row..3 * (row + s)].iter().map(|v| v - 0.5));
                    }
                }
            }
        }
        Tensor::new(vec![frames.len() * gh * gw, 3 * s * s], data)
    }

    /// Maps token-major head output `[T * L, s^2 k]` to pixel rows
    /// `[T * H * W, k]`.
    fn unshuffle<'t>(&self, x: Var<'t>, frames: usize, k: usize) -> Var<'t> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let s = c.patch;
        let mut perm = Vec::with_capacity(frames * c.pixels() * k);
        for t in 0..frames {
            for y in 0..c.height {
                for x in 0..c.width {
                    let tok = t * gh * gw + (y / s) * gw + x / s;
                    let sub = (y % s) * s + x % s;
                    perm.extend((0..k).map(|ch| tok * s * s * k + sub * k + ch));
                }
            }
        }
        x.permute(Rc::new(perm), vec![frames * c.pixels(), k])
    }

    /// Visual tokens `[T * L, C]` from independent per-frame encoding.
    pub fn encode<'t>(&self, p: &Binder<'t, '_>, frames: &FrameSequence) -> Var<'t> {
        let c = &self.config;
        let t = frames.len();
        let l = c.tokens_per_frame();
        let mut x = self.patch_embed.forward(p, p.constant(self.patchify(frames)));
        let tile = Rc::new((0..t * l).map(|r| r % l).collect());
        x = x.add(p.get(self.pos_embed).gather_rows(tile));
        if c.flags.intrinsics {
            if let Some(ks) = &frames.intrinsics {
                let k = Tensor::new(vec![t, 4], ks.iter().flat_map(|k| k.normalized()).collect());
                x = x.add_rows(self.intrinsics_embed.forward(p, p.constant(k)));
            }
        }
        let pattern = Rc::new(AttnPattern::from_fn(t * l, t * l, |i, j| i / l == j / l));
        let rope = Rc::new(RopeConfig { base: c.rope_base }.visual_table(t, c.grid(), c.dim / c.heads));
        for b in &self.encoder {
            x = b.forward(p, x, &pattern, &rope, c.heads);
        }
        self.encoder_norm.forward(p, x)
    }

    /// Adds per-frame camera tokens and runs the decoder stack.
    pub fn decode<'t>(&self, p: &Binder<'t, '_>, visual: Var<'t>, frames: usize) -> TokenVars<'t> {
        let c = &self.config;
        assert!(frames <= c.max_views, "{frames} views exceed max_views = {}", c.max_views);
        let camera = p
            .get(self.camera_token)
            .gather_rows(Rc::new(vec![0; frames]))
            .add(p.get(self.camera_pos).gather_rows(Rc::new((0..frames).collect())));
        let ctx = BlockContext::new(frames, c.grid(), &c.block_config());
        let mut x = TokenVars {
            visual,
            camera,
            frames,
            grid: c.grid(),
        };
        for b in &self.decoder {
            x = b.forward(p, x, &ctx);
        }
        x
    }

    /// Final normalization and all heads for the given phase.
    pub fn predict_heads<'t>(
        &self,
        p: &Binder<'t, '_>,
        state: TokenVars<'t>,
        frames: &FrameSequence,
        phase: Phase,
    ) -> ModelVars<'t> {
        let c = &self.config;
        let t = state.frames;
        let h = &self.heads;
        let n = t * c.pixels();
        let vis = self.final_norm.forward(p, state.visual);
        let cam = self.final_norm.forward(p, state.camera);

        let mut prior = Vec::with_capacity(n * 3);
        let mut log_scale = Vec::with_capacity(n * 3);
        for f in 0..t {
            let k = c.intrinsics_for(frames, f);
            let ls = (c.footprint_prior * c.depth_prior / k.fx).ln();
            for y in 0..c.height {
                for x in 0..c.width {
                    prior.extend((k.ray(x, y) * c.depth_prior).iter());
                    log_scale.extend([ls; 3]);
                }
            }
        }
        let prior = p.constant(Tensor::new(vec![n, 3], prior));
        let means = self.unshuffle(h.center.forward(p, vis), t, 3).add(prior);
        let opacity = self.unshuffle(h.opacity.forward(p, vis), t, 1).sigmoid();
        let quats = self
            .unshuffle(h.rotation.forward(p, vis), t, 4)
            .add_rows(p.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0])))
            .normalize_rows();
        let scales = self
            .unshuffle(h.scale.forward(p, vis), t, 3)
            .add(p.constant(Tensor::new(vec![n, 3], log_scale)))
            .clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)
            .exp();
        let colors = self.color_activation(p, self.unshuffle(h.color.forward(p, vis), t, color_width(c.sh_degree)), frames);

        let camera = (t > 1).then(|| {
            let rows = cam.gather_rows(Rc::new((1..t).collect()));
            let raw = h.camera.forward(p, rows);
            if c.flags.dq_param {
                raw.dq_normalize()
            } else {
                Var::concat_cols(&[raw.slice_cols(0, 4).normalize_rows(), raw.slice_cols(4, QUAT_TRANS_WIDTH)])
            }
        });
        let (pointmap, confidence) = match phase {
            Phase::Distill => (
                Some(self.unshuffle(h.pointmap.forward(p, vis), t, 3).add(prior)),
                Some(self.unshuffle(h.confidence.forward(p, vis), t, 1).softplus().add_scalar(1e-6)),
            ),
            Phase::Nvs => (None, None),
        };
        ModelVars {
            frames: t,
            means,
            opacity,
            quats,
            scales,
            colors,
            camera,
            pointmap,
            confidence,
        }
    }

    /// `sigmoid(head + logit(pixel))` on the base color; higher SH
    /// coefficients pass through.
    fn color_activation<'t>(&self, p: &Binder<'t, '_>, raw: Var<'t>, frames: &FrameSequence) -> Var<'t> {
        let n = raw.value().rows();
        let base: Vec<f64> = frames.images.iter().flat_map(|im| im.iter().map(|&v| logit(v))).collect();
        let base = p.constant(Tensor::new(vec![n, 3], base));
        if self.config.sh_degree == 0 {
            return raw.add(base).sigmoid();
        }
        let mut cols = Vec::with_capacity(6);
        for ch in 0..3 {
            cols.push(raw.slice_cols(4 * ch, 4 * ch + 1).add(base.slice_cols(ch, ch + 1)).sigmoid());
            cols.push(raw.slice_cols(4 * ch + 1, 4 * ch + 4));
        }
        Var::concat_cols(&cols)
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, frames: &FrameSequence, phase: Phase) -> ModelVars<'t> {
        self.check_input(frames).unwrap_or_else(|e| panic!("{e}"));
        let visual = self.encode(p, frames);
        let state = self.decode(p, visual, frames.len());
        self.predict_heads(p, state, frames, phase)
    }

    /// Gradient-free prediction.
    pub fn predict(&self, store: &ParamStore, frames: &FrameSequence, phase: Phase) -> Result<ModelOutput, ModelError> {
        self.check_input(frames)?;
        let tape = Tape::new();
        let p = Binder::frozen(&tape, store);
        let out = self.forward(&p, frames, phase);
        Ok(out.to_output(self.config.sh_degree, self.config.pixels()))
    }

    /// Copies every parameter of this model from `ckpt` by name.
    pub fn load_params(&self, store: &mut ParamStore, ckpt: &Checkpoint) -> Result<(), ModelError> {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != store.value(id).shape() {
                return Err(CheckpointError::Shape {
                    name,
                    want: store.value(id).shape().to_vec(),
                    got: t.shape().to_vec(),
                }
                .into());
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Rebuilds a model and its parameters from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore), ModelError> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let model = Self::new(ckpt.header.config.clone(), &mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        model.load_params(&mut store, ckpt)?;
        Ok((model, store))
    }
}

#[cfg(test)]
mod tests;

//! Decoder building blocks: the mixed camera/visual token sequence, blocked
//! causal masking, rotary phases, cross-neighbor attention and frame-wise
//! modulation.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Binder, FeedForward, Init, LayerNorm, Linear};
use crate::numerics::{AttnPattern, ParamStore, RopeTable, Tape, Tensor, Var};

/// Visual tokens `[T * L_f, C]` (frame-major) and camera tokens `[T, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub visual: Tensor,
    pub camera: Tensor,
    pub frames: usize,
    /// Patch grid `(rows, cols)`; `L_f = rows * cols`.
    pub grid: (usize, usize),
}

impl TokenState {
    pub fn new(visual: Tensor, camera: Tensor, frames: usize, grid: (usize, usize)) -> Self {
        assert_eq!(camera.rows(), frames, "camera tokens must have one row per frame");
        assert_eq!(visual.rows(), frames * grid.0 * grid.1, "visual token count mismatch");
        assert_eq!(visual.cols(), camera.cols(), "visual and camera width differ");
        Self {
            visual,
            camera,
            frames,
            grid,
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.camera.cols()
    }
}

/// On-tape counterpart of [`TokenState`].
#[derive(Clone, Copy)]
pub struct TokenVars<'t> {
    pub visual: Var<'t>,
    pub camera: Var<'t>,
    pub frames: usize,
    pub grid: (usize, usize),
}

impl<'t> TokenVars<'t> {
    pub fn constant(tape: &'t Tape, s: &TokenState) -> Self {
        Self {
            visual: tape.constant(s.visual.clone()),
            camera: tape.constant(s.camera.clone()),
            frames: s.frames,
            grid: s.grid,
        }
    }

    pub fn to_state(&self) -> TokenState {
        TokenState::new(self.visual.to_tensor(), self.camera.to_tensor(), self.frames, self.grid)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Positions of camera and visual tokens in the mixed sequence
/// `[phi_1, x_1.., phi_2, x_2.., ...]`.
#[derive(Clone, Debug)]
pub struct MixedIndex {
    frames: usize,
    per_frame: usize,
    /// Mixed position -> row of `concat_rows([camera, visual])`.
    to_mixed: Rc<Vec<usize>>,
    camera_rows: Rc<Vec<usize>>,
    visual_rows: Rc<Vec<usize>>,
}

impl MixedIndex {
    pub fn new(frames: usize, per_frame: usize) -> Self {
        let stride = 1 + per_frame;
        let mut to_mixed = Vec::with_capacity(frames * stride);
        for t in 0..frames {
            to_mixed.push(t);
            to_mixed.extend((0..per_frame).map(|k| frames + t * per_frame + k));
        }
        let camera_rows = (0..frames).map(|t| t * stride).collect();
        let visual_rows = (0..frames)
            .flat_map(|t| (0..per_frame).map(move |k| t * stride + 1 + k))
            .collect();
        Self {
            frames,
            per_frame,
            to_mixed: Rc::new(to_mixed),
            camera_rows: Rc::new(camera_rows),
            visual_rows: Rc::new(visual_rows),
        }
    }

    pub fn len(&self) -> usize {
        self.frames * (1 + self.per_frame)
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn camera_index(&self, t: usize) -> usize {
        t * (1 + self.per_frame)
    }

    pub fn visual_index(&self, t: usize, k: usize) -> usize {
        t * (1 + self.per_frame) + 1 + k
    }

    pub fn frame_of(&self, m: usize) -> usize {
        m / (1 + self.per_frame)
    }

    pub fn is_camera(&self, m: usize) -> bool {
        m % (1 + self.per_frame) == 0
    }

    pub fn mix<'t>(&self, x: &TokenVars<'t>) -> Var<'t> {
        Var::concat_rows(&[x.camera, x.visual]).gather_rows(self.to_mixed.clone())
    }

    pub fn split<'t>(&self, seq: Var<'t>, grid: (usize, usize)) -> TokenVars<'t> {
        TokenVars {
            visual: seq.gather_rows(self.visual_rows.clone()),
            camera: seq.gather_rows(self.camera_rows.clone()),
            frames: self.frames,
            grid,
        }
    }
}

pub fn build_mixed_sequence(state: &TokenState) -> (Tensor, MixedIndex) {
    let idx = MixedIndex::new(state.frames, state.tokens_per_frame());
    let c = state.width();
    let mut data = Vec::with_capacity(idx.len() * c);
    for t in 0..state.frames {
        data.extend_from_slice(state.camera.row(t));
        for k in 0..idx.per_frame {
            data.extend_from_slice(state.visual.row(t * idx.per_frame + k));
        }
    }
    (Tensor::new(vec![idx.len(), c], data), idx)
}

pub fn split_mixed_sequence(seq: &Tensor, idx: &MixedIndex, grid: (usize, usize)) -> TokenState {
    assert_eq!(seq.rows(), idx.len());
    let c = seq.cols();
    let take = |rows: &[usize]| {
        let mut d = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            d.extend_from_slice(seq.row(r));
        }
        Tensor::new(vec![rows.len(), c], d)
    };
    TokenState::new(take(&idx.visual_rows), take(&idx.camera_rows), idx.frames, grid)
}

/// Dense boolean mask over the mixed sequence; `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self { n, bits }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn to_pattern(&self) -> AttnPattern {
        AttnPattern::from_fn(self.n, self.n, |i, j| self.allows(i, j))
    }
}

/// Camera token `t` sees camera and visual tokens of frames `<= t`; visual
/// tokens see everything.
pub fn build_blocked_causal_mask(frames: usize, per_frame: usize) -> AttentionMask {
    let idx = MixedIndex::new(frames, per_frame);
    AttentionMask::from_fn(idx.len(), |i, j| !idx.is_camera(i) || idx.frame_of(j) <= idx.frame_of(i))
}

pub fn build_full_mask(frames: usize, per_frame: usize) -> AttentionMask {
    AttentionMask::from_fn(frames * (1 + per_frame), |_, _| true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self { base: 100.0 }
    }
}

impl RopeConfig {
    fn freq(&self, p: usize, n: usize) -> f64 {
        self.base.powf(-(p as f64) / n as f64)
    }

    /// All channel pairs rotate by `pos * freq`.
    fn angles_1d(&self, pairs: usize, pos: f64, out: &mut Vec<f64>) {
        out.extend((0..pairs).map(|p| pos * self.freq(p, pairs)));
    }

    /// First half of the pairs follows the patch row, second half the column.
    fn angles_2d(&self, pairs: usize, row: f64, col: f64, out: &mut Vec<f64>) {
        let h = pairs / 2;
        out.extend((0..h).map(|p| row * self.freq(p, h)));
        out.extend((0..pairs - h).map(|p| col * self.freq(p, pairs - h)));
    }

    /// Phases for the mixed sequence: frame index for camera tokens, patch
    /// coordinates for visual tokens.
    pub fn mixed_table(&self, frames: usize, grid: (usize, usize), head_dim: usize) -> RopeTable {
        let pairs = head_dim / 2;
        let mut a = Vec::new();
        for t in 0..frames {
            self.angles_1d(pairs, t as f64, &mut a);
            for k in 0..grid.0 * grid.1 {
                self.angles_2d(pairs, (k / grid.1) as f64, (k % grid.1) as f64, &mut a);
            }
        }
        RopeTable::from_angles(pairs, &a)
    }

    /// 2D phases for visual tokens alone, repeated per frame.
    pub fn visual_table(&self, frames: usize, grid: (usize, usize), head_dim: usize) -> RopeTable {
        let pairs = head_dim / 2;
        let mut a = Vec::new();
        for _ in 0..frames {
            for k in 0..grid.0 * grid.1 {
                self.angles_2d(pairs, (k / grid.1) as f64, (k % grid.1) as f64, &mut a);
            }
        }
        RopeTable::from_angles(pairs, &a)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborOrder {
    #[default]
    PrevNext,
    NextPrev,
}

/// Keys for cross-neighbor attention: for frame `t` the rows of frames
/// `t - 1` and `t + 1` concatenated, queries of frame `t` attending to that
/// block only.
#[derive(Clone, Debug)]
pub struct CnaLayout {
    pub key_rows: Rc<Vec<usize>>,
    pub pattern: Rc<AttnPattern>,
    spans: Vec<(usize, usize)>,
}

impl CnaLayout {
    pub fn new(frames: usize, per_frame: usize, order: NeighborOrder) -> Self {
        let mut key_rows = Vec::new();
        let mut spans = Vec::with_capacity(frames);
        for t in 0..frames {
            let prev = t.checked_sub(1);
            let next = (t + 1 < frames).then_some(t + 1);
            let nb = match order {
                NeighborOrder::PrevNext => [prev, next],
                NeighborOrder::NextPrev => [next, prev],
            };
            let start = key_rows.len();
            for f in nb.into_iter().flatten() {
                key_rows.extend(f * per_frame..(f + 1) * per_frame);
            }
            spans.push((start, key_rows.len()));
        }
        let n_key = key_rows.len();
        let pattern = AttnPattern::from_fn(frames * per_frame, n_key, |i, j| {
            let (s, e) = spans[i / per_frame];
            (s..e).contains(&j)
        });
        Self {
            key_rows: Rc::new(key_rows),
            pattern: Rc::new(pattern),
            spans,
        }
    }

    /// Number of keys frame `t` attends to.
    pub fn context_size(&self, t: usize) -> usize {
        self.spans[t].1 - self.spans[t].0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlags {
    pub modulation: bool,
    pub cna: bool,
    pub causal_mask: bool,
}

impl Default for BlockFlags {
    fn default() -> Self {
        Self {
            modulation: true,
            cna: true,
            causal_mask: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub rope: RopeConfig,
    pub neighbor_order: NeighborOrder,
    pub flags: BlockFlags,
}

impl BlockConfig {
    pub fn new(width: usize, heads: usize) -> Self {
        Self {
            width,
            heads,
            ffn_hidden: 4 * width,
            rope: RopeConfig::default(),
            neighbor_order: NeighborOrder::default(),
            flags: BlockFlags::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Index tables shared by every block for one `(T, grid)` shape.
pub struct BlockContext {
    pub frames: usize,
    pub grid: (usize, usize),
    pub index: MixedIndex,
    pub mask: AttentionMask,
    pub mask_pattern: Rc<AttnPattern>,
    pub mixed_rope: Rc<RopeTable>,
    pub visual_rope: Rc<RopeTable>,
    pub cna: CnaLayout,
    pub heads: usize,
    pub flags: BlockFlags,
}

impl BlockContext {
    pub fn new(frames: usize, grid: (usize, usize), cfg: &BlockConfig) -> Self {
        assert!(frames >= 1);
        assert_eq!(cfg.width % cfg.heads, 0, "heads must divide width");
        assert_eq!(cfg.head_dim() % 4, 0, "head dim must be a multiple of 4 for 2D rotary phases");
        let per_frame = grid.0 * grid.1;
        let mask = if cfg.flags.causal_mask {
            build_blocked_causal_mask(frames, per_frame)
        } else {
            build_full_mask(frames, per_frame)
        };
        Self {
            frames,
            grid,
            index: MixedIndex::new(frames, per_frame),
            mask_pattern: Rc::new(mask.to_pattern()),
            mask,
            mixed_rope: Rc::new(cfg.rope.mixed_table(frames, grid, cfg.head_dim())),
            visual_rope: Rc::new(cfg.rope.visual_table(frames, grid, cfg.head_dim())),
            cna: CnaLayout::new(frames, per_frame, cfg.neighbor_order),
            heads: cfg.heads,
            flags: cfg.flags,
        }
    }
}

/// Fused query/key/value projection plus output projection.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub qkv: Linear,
    pub out: Linear,
}

impl AttnWeights {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, Init::Xavier, rng),
        }
    }

    fn project<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
        let c = x.value().cols();
        let qkv = self.qkv.forward(p, x);
        (qkv.slice_cols(0, c), qkv.slice_cols(c, 2 * c), qkv.slice_cols(2 * c, 3 * c))
    }
}

/// `x + Out(Attn(RoPE(Q), RoPE(K), V))` with `Q, K, V` projected from
/// `LN(x)` and attention restricted to `pattern`.
pub fn self_attention_residual<'t>(
    p: &Binder<'t, '_>,
    norm: &LayerNorm,
    w: &AttnWeights,
    x: Var<'t>,
    pattern: &Rc<AttnPattern>,
    rope: &Rc<RopeTable>,
    heads: usize,
) -> Var<'t> {
    let (q, k, v) = w.project(p, norm.forward(p, x));
    let q = q.rotary(rope.clone(), heads);
    let k = k.rotary(rope.clone(), heads);
    x.add(w.out.forward(p, q.attention(k, v, pattern.clone(), heads)))
}

/// Pre-norm masked self-attention over the mixed sequence with a residual.
pub fn video_camera_attention<'t>(
    p: &Binder<'t, '_>,
    norm: &LayerNorm,
    w: &AttnWeights,
    x: TokenVars<'t>,
    ctx: &BlockContext,
) -> TokenVars<'t> {
    let seq = ctx.index.mix(&x);
    let out = self_attention_residual(p, norm, w, seq, &ctx.mask_pattern, &ctx.mixed_rope, ctx.heads);
    ctx.index.split(out, x.grid)
}

/// Attention of each frame's visual tokens to its neighbor frames, without
/// normalization or residual: `softmax(Q_t K~_t^T / sqrt(d)) V~_t`, then the
/// output projection.
pub fn cross_neighbor_attention<'t>(p: &Binder<'t, '_>, w: &AttnWeights, h: Var<'t>, ctx: &BlockContext) -> Var<'t> {
    let (q, k, v) = w.project(p, h);
    let q = q.rotary(ctx.visual_rope.clone(), ctx.heads);
    let k = k.rotary(ctx.visual_rope.clone(), ctx.heads);
    let keys = k.gather_rows(ctx.cna.key_rows.clone());
    let vals = v.gather_rows(ctx.cna.key_rows.clone());
    w.out.forward(p, q.attention(keys, vals, ctx.cna.pattern.clone(), ctx.heads))
}

/// Per-frame scale, shift and gate, each `[T, C]`.
#[derive(Clone, Copy)]
pub struct Modulation<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    pub delta: Var<'t>,
}

/// Affine map from a camera token to `(gamma, beta, delta)`; zero at
/// initialization.
#[derive(Clone, Copy, Debug)]
pub struct Modulator {
    pub linear: Linear,
}

impl Modulator {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, name, width, 3 * width, Init::Zeros, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, camera: Var<'t>) -> Modulation<'t> {
        let c = camera.value().cols();
        let m = self.linear.forward(p, camera);
        Modulation {
            gamma: m.slice_cols(0, c),
            beta: m.slice_cols(c, 2 * c),
            delta: m.slice_cols(2 * c, 3 * c),
        }
    }
}

/// `x + (1 + delta_t) * f(LN(x) * (1 + gamma_t) + beta_t)` on the visual
/// rows of each frame, or the plain pre-norm residual without modulation.
pub fn framewise_modulate<'t>(
    p: &Binder<'t, '_>,
    norm: &LayerNorm,
    m: Option<Modulation<'t>>,
    x: Var<'t>,
    f: impl FnOnce(Var<'t>) -> Var<'t>,
) -> Var<'t> {
    let h = norm.forward(p, x);
    match m {
        None => x.add(f(h)),
        Some(m) => {
            let h = h.mul_rows(m.gamma.add_scalar(1.0)).add_rows(m.beta);
            x.add(f(h).mul_rows(m.delta.add_scalar(1.0)))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub vca_norm: LayerNorm,
    pub vca: AttnWeights,
    pub cna_norm: LayerNorm,
    pub cna: AttnWeights,
    pub cna_mod: Modulator,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_mod: Modulator,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.width;
        Self {
            vca_norm: LayerNorm::new(store, &format!("{name}.vca_norm"), c),
            vca: AttnWeights::new(store, &format!("{name}.vca"), c, rng),
            cna_norm: LayerNorm::new(store, &format!("{name}.cna_norm"), c),
            cna: AttnWeights::new(store, &format!("{name}.cna"), c, rng),
            cna_mod: Modulator::new(store, &format!("{name}.cna_mod"), c, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), c),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), c, cfg.ffn_hidden, rng),
            ffn_mod: Modulator::new(store, &format!("{name}.ffn_mod"), c, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: TokenVars<'t>, ctx: &BlockContext) -> TokenVars<'t> {
        let x = video_camera_attention(p, &self.vca_norm, &self.vca, x, ctx);
        let modulate = ctx.flags.modulation;
        let mut visual = x.visual;
        if ctx.flags.cna && ctx.frames > 1 {
            let m = modulate.then(|| self.cna_mod.forward(p, x.camera));
            visual = framewise_modulate(p, &self.cna_norm, m, visual, |h| {
                cross_neighbor_attention(p, &self.cna, h, ctx)
            });
        }
        let m = modulate.then(|| self.ffn_mod.forward(p, x.camera));
        visual = framewise_modulate(p, &self.ffn_norm, m, visual, |h| self.ffn.forward(p, h));
        let camera = framewise_modulate(p, &self.ffn_norm, None, x.camera, |h| self.ffn.forward(p, h));
        TokenVars {
            visual,
            camera,
            ..x
        }
    }
}

fn block_case_store(cfg: &BlockConfig, rng: &mut impl Rng) -> (ParamStore, DecoderBlock) {
    let mut store = ParamStore::new();
    let block = DecoderBlock::new(&mut store, "blk", cfg, rng);
    (store, block)
}

/// Finite-difference cases over token inputs and every block parameter.
pub fn grad_cases() -> Vec<crate::numerics::GradCase> {
    use crate::numerics::gradcheck::uniform;
    use crate::numerics::GradCase;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut v = Vec::new();
    for (label, flags) in [
        ("decoder_block", BlockFlags::default()),
        (
            "decoder_block_full_mask",
            BlockFlags {
                causal_mask: false,
                ..BlockFlags::default()
            },
        ),
    ] {
        let mut cfg = BlockConfig::new(8, 2);
        cfg.ffn_hidden = 12;
        cfg.flags = flags;
        let (frames, grid) = (2, (2, 2));
        v.push(GradCase::new(
            label,
            move |r| {
                let (store, _) = block_case_store(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
                let mut out = vec![
                    uniform(&mut *r, [frames * 4, cfg.width], -1.0, 1.0),
                    uniform(&mut *r, [frames, cfg.width], -1.0, 1.0),
                ];
                for id in store.ids() {
                    let t = store.value(id);
                    let shape = t.shape().to_vec();
                    // Perturb every parameter so zero-initialized paths are exercised.
                    let mut t = t.clone();
                    for (a, b) in t.data_mut().iter_mut().zip(uniform(&mut *r, shape, -0.3, 0.3).data()) {
                        *a += b;
                    }
                    out.push(t);
                }
                out
            },
            move |tape, x| {
                let (store, block) = block_case_store(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
                let p = Binder::with_vars(tape, &store, store.ids().zip(x[2..].iter().copied()));
                let ctx = BlockContext::new(frames, grid, &cfg);
                let tv = TokenVars {
                    visual: x[0],
                    camera: x[1],
                    frames,
                    grid,
                };
                let out = block.forward(&p, tv, &ctx);
                Var::concat_rows(&[out.visual, out.camera])
            },
        ));
    }
    v
}

#[cfg(test)]
mod tests;

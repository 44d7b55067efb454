//! Core primitives: elementwise arithmetic, matrix products, reductions,
//! row-wise normalizations, attention and rotary phases, and index plumbing.

use std::rc::Rc;

use super::gemm::{gemm, Operand};
use super::tape::{Primitive, Var};
use super::tensor::Tensor;

type Grads = Vec<Option<Vec<f64>>>;

fn assert_same(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn map_grad(need: bool, f: impl FnOnce() -> Vec<f64>) -> Option<Vec<f64>> {
    need.then(f)
}

// ── elementwise binary ──────────────────────────────────────────────────

struct Add;
impl Primitive for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![map_grad(needs[0], || g.to_vec()), map_grad(needs[1], || g.to_vec())]
    }
}

struct Sub;
impl Primitive for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![
            map_grad(needs[0], || g.to_vec()),
            map_grad(needs[1], || g.iter().map(|v| -v).collect()),
        ]
    }
}

struct Mul;
impl Primitive for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![
            map_grad(needs[0], || g.iter().zip(x[1].data()).map(|(g, b)| g * b).collect()),
            map_grad(needs[1], || g.iter().zip(x[0].data()).map(|(g, a)| g * a).collect()),
        ]
    }
}

/// `x[r, c] (+|*) b[r / rows_per_group, c]`.
struct RowBroadcast {
    multiply: bool,
    rows_per_group: usize,
}
impl Primitive for RowBroadcast {
    fn name(&self) -> &'static str {
        if self.multiply {
            "mul_rows"
        } else {
            "add_rows"
        }
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        let b = x[1].data();
        let xs = x[0].data();
        let gx = map_grad(needs[0], || {
            if !self.multiply {
                return g.to_vec();
            }
            let mut out = vec![0.0; g.len()];
            for (r, (orow, grow)) in out.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                let brow = &b[(r / self.rows_per_group) * c..][..c];
                for ((o, gv), bv) in orow.iter_mut().zip(grow).zip(brow) {
                    *o = gv * bv;
                }
            }
            out
        });
        let gb = map_grad(needs[1], || {
            let mut out = vec![0.0; b.len()];
            for (r, grow) in g.chunks(c).enumerate() {
                let orow = &mut out[(r / self.rows_per_group) * c..][..c];
                if self.multiply {
                    let xrow = &xs[r * c..][..c];
                    for ((o, gv), xv) in orow.iter_mut().zip(grow).zip(xrow) {
                        *o += gv * xv;
                    }
                } else {
                    for (o, gv) in orow.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
            }
            out
        });
        vec![gx, gb]
    }
}

// ── elementwise unary ───────────────────────────────────────────────────

#[derive(Clone, Copy)]
enum Unary {
    Scale(f64),
    AddScalar(f64),
    Gelu,
    Sigmoid,
    Exp,
    Softplus,
    Abs,
    Clamp(f64, f64),
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Abs => x.abs(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Clamp(lo, hi) => {
                if x < lo || x > hi {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

impl Primitive for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Softplus => "softplus",
            Unary::Abs => "abs",
            Unary::Clamp(..) => "clamp",
        }
    }
    fn vjp(&self, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![map_grad(needs[0], || {
            x[0].data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&xv, &yv), gv)| gv * self.derivative(xv, yv))
                .collect()
        })]
    }
}

// ── matrix product ──────────────────────────────────────────────────────

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
    deterministic: bool,
}
impl Primitive for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = map_grad(needs[0], || {
            let mut out = vec![0.0; m * k];
            gemm(
                m,
                n,
                k,
                Operand { data: g, transposed: false },
                Operand { data: x[1].data(), transposed: true },
                &mut out,
                false,
                self.deterministic,
            );
            out
        });
        let gb = map_grad(needs[1], || {
            let mut out = vec![0.0; k * n];
            gemm(
                k,
                m,
                n,
                Operand { data: x[0].data(), transposed: true },
                Operand { data: g, transposed: false },
                &mut out,
                false,
                self.deterministic,
            );
            out
        });
        vec![ga, gb]
    }
}

// ── reductions ──────────────────────────────────────────────────────────

struct Sum {
    scale: f64,
    name: &'static str,
}
impl Primitive for Sum {
    fn name(&self) -> &'static str {
        self.name
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![map_grad(needs[0], || vec![g[0] * self.scale; x[0].numel()])]
    }
}

/// Per-row Euclidean norm; the subgradient at a zero row is zero.
struct RowNorm;
impl Primitive for RowNorm {
    fn name(&self) -> &'static str {
        "row_norm"
    }
    fn vjp(&self, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; x[0].numel()];
            for (r, (orow, xrow)) in out.chunks_mut(c).zip(x[0].data().chunks(c)).enumerate() {
                let n = y.data()[r];
                if n > 0.0 {
                    for (o, xv) in orow.iter_mut().zip(xrow) {
                        *o = g[r] * xv / n;
                    }
                }
            }
            out
        })]
    }
}

// ── row-wise normalizations ─────────────────────────────────────────────

struct SoftmaxRows;
impl Primitive for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn vjp(&self, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; g.len()];
            for ((orow, yrow), grow) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = yv * (gv - dot);
                }
            }
            out
        })]
    }
}

struct LayerNorm {
    rstd: Vec<f64>,
}
impl Primitive for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn vjp(&self, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; g.len()];
            let inv_c = 1.0 / c as f64;
            for (r, ((orow, yrow), grow)) in out
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.chunks(c))
                .enumerate()
            {
                let mean_g: f64 = grow.iter().sum::<f64>() * inv_c;
                let mean_gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() * inv_c;
                let rstd = self.rstd[r];
                for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = rstd * (gv - mean_g - yv * mean_gy);
                }
            }
            out
        })]
    }
}

/// `x / |x|` per row. Rows must be nonzero.
struct NormalizeRows {
    norms: Vec<f64>,
}
impl Primitive for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }
    fn vjp(&self, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; g.len()];
            for (r, ((orow, yrow), grow)) in out
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.chunks(c))
                .enumerate()
            {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                let n = self.norms[r];
                for ((o, yv), gv) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = (gv - yv * dot) / n;
                }
            }
            out
        })]
    }
}

// ── attention ───────────────────────────────────────────────────────────

/// Sparse attention pattern: for each query row, the key columns it may see.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnPattern {
    n_query: usize,
    n_key: usize,
    rows: Vec<Vec<u32>>,
}

impl AttnPattern {
    pub fn from_fn(n_query: usize, n_key: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let rows = (0..n_query)
            .map(|i| (0..n_key).filter(|&j| allowed(i, j)).map(|j| j as u32).collect())
            .collect();
        Self { n_query, n_key, rows }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| true)
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_key(&self) -> usize {
        self.n_key
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&(j as u32)).is_ok()
    }
}

struct Attention {
    heads: usize,
    pattern: Rc<AttnPattern>,
    /// Softmax weights for each (head, row, allowed column).
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

impl Primitive for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let (q, k, v) = (x[0].data(), x[1].data(), x[2].data());
        let c = x[0].cols();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let per_head = *self.offsets.last().unwrap();
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut dp = Vec::new();
        for h in 0..self.heads {
            let off = h * d;
            for i in 0..self.pattern.n_query {
                let cols = self.pattern.row(i);
                let probs = &self.probs[h * per_head + self.offsets[i]..][..cols.len()];
                let gi = &g[i * c + off..][..d];
                dp.clear();
                for &j in cols {
                    let vj = &v[j as usize * c + off..][..d];
                    dp.push(dot(gi, vj));
                }
                let s: f64 = probs.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qi: Vec<f64> = q[i * c + off..][..d].to_vec();
                let gqi = &mut gq[i * c + off..][..d];
                for ((&j, &p), &dpj) in cols.iter().zip(probs).zip(&dp) {
                    let j = j as usize;
                    let ds = p * (dpj - s) * scale;
                    let kj = &k[j * c + off..][..d];
                    for (a, b) in gqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let gkj = &mut gk[j * c + off..][..d];
                    for (a, b) in gkj.iter_mut().zip(&qi) {
                        *a += ds * b;
                    }
                    let gvj = &mut gv[j * c + off..][..d];
                    for (a, b) in gvj.iter_mut().zip(gi) {
                        *a += p * b;
                    }
                }
            }
        }
        vec![
            needs[0].then_some(gq),
            needs[1].then_some(gk),
            needs[2].then_some(gv),
        ]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-row rotation angles for rotary position phases.
///
/// Each row holds `pairs` angles; pair `p` rotates channels `(2p, 2p+1)` of
/// every head.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn from_angles(pairs: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len() % pairs.max(1), 0);
        Self {
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        }
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn rows(&self) -> usize {
        if self.pairs == 0 {
            0
        } else {
            self.cos.len() / self.pairs
        }
    }

    fn apply(&self, x: &[f64], c: usize, heads: usize, inverse: bool) -> Vec<f64> {
        let d = c / heads;
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = x.to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let cs = &self.cos[r * self.pairs..][..self.pairs];
            let sn = &self.sin[r * self.pairs..][..self.pairs];
            for h in 0..heads {
                let head = &mut row[h * d..(h + 1) * d];
                for p in 0..self.pairs {
                    let (a, b) = (head[2 * p], head[2 * p + 1]);
                    let s = sign * sn[p];
                    head[2 * p] = a * cs[p] - b * s;
                    head[2 * p + 1] = a * s + b * cs[p];
                }
            }
        }
        out
    }
}

struct Rotary {
    heads: usize,
    table: Rc<RopeTable>,
}
impl Primitive for Rotary {
    fn name(&self) -> &'static str {
        "rotary"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![map_grad(needs[0], || self.table.apply(g, x[0].cols(), self.heads, true))]
    }
}

// ── index plumbing ──────────────────────────────────────────────────────

struct GatherRows {
    idx: Rc<Vec<usize>>,
}
impl Primitive for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; x[0].numel()];
            for (&r, grow) in self.idx.iter().zip(g.chunks(c)) {
                for (o, gv) in out[r * c..(r + 1) * c].iter_mut().zip(grow) {
                    *o += gv;
                }
            }
            out
        })]
    }
}

struct ConcatRows;
impl Primitive for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let mut start = 0;
        x.iter()
            .zip(needs)
            .map(|(t, &need)| {
                let n = t.numel();
                let out = need.then(|| g[start..start + n].to_vec());
                start += n;
                out
            })
            .collect()
    }
}

struct ConcatCols;
impl Primitive for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn vjp(&self, x: &[&Tensor], y: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let total = y.cols();
        let mut start = 0;
        x.iter()
            .zip(needs)
            .map(|(t, &need)| {
                let c = t.cols();
                let out = need.then(|| {
                    g.chunks(total)
                        .flat_map(|row| row[start..start + c].iter().copied())
                        .collect()
                });
                start += c;
                out
            })
            .collect()
    }
}

struct SliceCols {
    start: usize,
    end: usize,
}
impl Primitive for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        let c = x[0].cols();
        let w = self.end - self.start;
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; x[0].numel()];
            for (orow, grow) in out.chunks_mut(c).zip(g.chunks(w)) {
                orow[self.start..self.end].copy_from_slice(grow);
            }
            out
        })]
    }
}

/// `y[i] = x[perm[i]]`.
struct Permute {
    perm: Rc<Vec<usize>>,
}
impl Primitive for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn vjp(&self, x: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![map_grad(needs[0], || {
            let mut out = vec![0.0; x[0].numel()];
            for (&src, gv) in self.perm.iter().zip(g) {
                out[src] += gv;
            }
            out
        })]
    }
}

struct Reshape;
impl Primitive for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Grads {
        vec![map_grad(needs[0], || g.to_vec())]
    }
}

// ── Var API ─────────────────────────────────────────────────────────────

fn binary_same<'t>(
    a: Var<'t>,
    b: Var<'t>,
    prim: impl Primitive + 'static,
    f: impl Fn(f64, f64) -> f64,
) -> Var<'t> {
    let value = {
        let (x, y) = (a.value(), b.value());
        assert_same(&x, &y, prim.name());
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    };
    a.tape.record(prim, &[a, b], value)
}

impl<'t> Var<'t> {
    fn unary(self, op: Unary) -> Var<'t> {
        let value = {
            let x = self.value();
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| op.forward(v)).collect())
        };
        self.tape.record(op, &[self], value)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        binary_same(self, other, Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        binary_same(self, other, Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        binary_same(self, other, Mul, |a, b| a * b)
    }

    fn row_broadcast(self, b: Var<'t>, multiply: bool) -> Var<'t> {
        let (value, rows_per_group) = {
            let (x, bv) = (self.value(), b.value());
            let c = x.cols();
            assert_eq!(bv.cols(), c, "row broadcast: column mismatch");
            let groups = bv.rows();
            assert!(groups > 0 && x.rows() % groups == 0, "row broadcast: {} rows over {} groups", x.rows(), groups);
            let rpg = x.rows() / groups;
            let mut out = x.data().to_vec();
            for (r, row) in out.chunks_mut(c).enumerate() {
                let brow = bv.row(r / rpg);
                for (o, bb) in row.iter_mut().zip(brow) {
                    if multiply {
                        *o *= bb;
                    } else {
                        *o += bb;
                    }
                }
            }
            (Tensor::new(x.shape().to_vec(), out), rpg)
        };
        self.tape.record(
            RowBroadcast {
                multiply,
                rows_per_group,
            },
            &[self, b],
            value,
        )
    }

    /// Adds `b` (shape `[G, C]`) to consecutive row groups of `self`.
    pub fn add_rows(self, b: Var<'t>) -> Var<'t> {
        self.row_broadcast(b, false)
    }

    /// Multiplies consecutive row groups of `self` by rows of `b`.
    pub fn mul_rows(self, b: Var<'t>) -> Var<'t> {
        self.row_broadcast(b, true)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Unary::AddScalar(c))
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    /// `[.., K] x [K, N] -> [.., N]`.
    pub fn matmul(self, b: Var<'t>) -> Var<'t> {
        let (value, m, k, n) = {
            let (x, w) = (self.value(), b.value());
            assert_eq!(w.shape().len(), 2, "matmul rhs must be 2-d");
            let k = x.cols();
            assert_eq!(w.shape()[0], k, "matmul: inner dims {} vs {}", k, w.shape()[0]);
            let (m, n) = (x.rows(), w.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                Operand { data: x.data(), transposed: false },
                Operand { data: w.data(), transposed: false },
                &mut out,
                false,
                self.tape.mode().deterministic,
            );
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(shape, out), m, k, n)
        };
        let deterministic = self.tape.mode().deterministic;
        self.tape.record(MatMul { m, k, n, deterministic }, &[self, b], value)
    }

    /// `self @ w + b`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        self.matmul(w).add_rows(b)
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value().sum();
        self.tape.record(Sum { scale: 1.0, name: "sum" }, &[self], Tensor::scalar(v))
    }

    pub fn mean(self) -> Var<'t> {
        let (v, n) = {
            let x = self.value();
            (x.sum() / x.numel() as f64, x.numel())
        };
        self.tape.record(
            Sum {
                scale: 1.0 / n as f64,
                name: "mean",
            },
            &[self],
            Tensor::scalar(v),
        )
    }

    /// Euclidean norm of each row; output shape `[rows, 1]`.
    pub fn row_norm(self) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            let norms: Vec<f64> = x.data().chunks(c).map(|r| dot(r, r).sqrt()).collect();
            Tensor::new(vec![norms.len(), 1], norms)
        };
        self.tape.record(RowNorm, &[self], value)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(x.shape().to_vec(), out)
        };
        self.tape.record(SoftmaxRows, &[self], value)
    }

    /// Zero-mean, unit-variance normalization of each row (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (value, rstd) = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.data().to_vec();
            let mut rstd = Vec::with_capacity(x.rows());
            for row in out.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * r);
                rstd.push(r);
            }
            (Tensor::new(x.shape().to_vec(), out), rstd)
        };
        self.tape.record(LayerNorm { rstd }, &[self], value)
    }

    pub fn normalize_rows(self) -> Var<'t> {
        let (value, norms) = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.data().to_vec();
            let mut norms = Vec::with_capacity(x.rows());
            for row in out.chunks_mut(c) {
                let n = dot(row, row).sqrt();
                assert!(n != 0.0, "normalize_rows: zero row");
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            (Tensor::new(x.shape().to_vec(), out), norms)
        };
        self.tape.record(NormalizeRows { norms }, &[self], value)
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    ///
    /// `self` holds queries `[Nq, C]`; `k` and `v` are `[Nk, C]`.
    pub fn attention(self, k: Var<'t>, v: Var<'t>, pattern: Rc<AttnPattern>, heads: usize) -> Var<'t> {
        let (value, probs, offsets) = {
            let (qt, kt, vt) = (self.value(), k.value(), v.value());
            let c = qt.cols();
            assert_eq!(kt.cols(), c);
            assert_eq!(vt.cols(), c);
            assert_eq!(kt.rows(), vt.rows());
            assert_eq!(pattern.n_query, qt.rows(), "attention: pattern/query mismatch");
            assert_eq!(pattern.n_key, kt.rows(), "attention: pattern/key mismatch");
            assert_eq!(c % heads, 0, "attention: heads must divide width");
            let d = c / heads;
            let scale = 1.0 / (d as f64).sqrt();
            let mut offsets = Vec::with_capacity(pattern.n_query + 1);
            let mut total = 0;
            for r in &pattern.rows {
                offsets.push(total);
                total += r.len();
            }
            offsets.push(total);
            let (q, kd, vd) = (qt.data(), kt.data(), vt.data());
            let mut out = vec![0.0; pattern.n_query * c];
            let mut probs = vec![0.0; heads * total];
            for h in 0..heads {
                let off = h * d;
                for i in 0..pattern.n_query {
                    let cols = pattern.row(i);
                    if cols.is_empty() {
                        continue;
                    }
                    let qi = &q[i * c + off..][..d];
                    let p = &mut probs[h * total + offsets[i]..][..cols.len()];
                    let mut m = f64::NEG_INFINITY;
                    for (pv, &j) in p.iter_mut().zip(cols) {
                        *pv = dot(qi, &kd[j as usize * c + off..][..d]) * scale;
                        m = m.max(*pv);
                    }
                    let mut s = 0.0;
                    for pv in p.iter_mut() {
                        *pv = (*pv - m).exp();
                        s += *pv;
                    }
                    let oi = &mut out[i * c + off..][..d];
                    for (pv, &j) in p.iter_mut().zip(cols) {
                        *pv /= s;
                        let vj = &vd[j as usize * c + off..][..d];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += *pv * x;
                        }
                    }
                }
            }
            (Tensor::new(vec![pattern.n_query, c], out), probs, offsets)
        };
        self.tape.record(
            Attention {
                heads,
                pattern,
                probs,
                offsets,
            },
            &[self, k, v],
            value,
        )
    }

    /// Rotates channel pairs of every head by per-row angles.
    pub fn rotary(self, table: Rc<RopeTable>, heads: usize) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            assert_eq!(c % heads, 0);
            assert!(2 * table.pairs <= c / heads, "rotary: too many pairs for head dim");
            assert_eq!(table.rows(), x.rows(), "rotary: table rows mismatch");
            Tensor::new(x.shape().to_vec(), table.apply(x.data(), c, heads, false))
        };
        self.tape.record(Rotary { heads, table }, &[self], value)
    }

    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &r in idx.iter() {
                out.extend_from_slice(x.row(r));
            }
            Tensor::new(vec![idx.len(), c], out)
        };
        self.tape.record(GatherRows { idx }, &[self], value)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let value = {
            let c = parts[0].value().cols();
            let mut out = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = p.value();
                assert_eq!(v.cols(), c, "concat_rows: column mismatch");
                out.extend_from_slice(v.data());
                rows += v.rows();
            }
            Tensor::new(vec![rows, c], out)
        };
        parts[0].tape.record(ConcatRows, parts, value)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rows = vals[0].rows();
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                    out.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(vec![rows, total], out)
        };
        parts[0].tape.record(ConcatCols, parts, value)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            assert!(start < end && end <= c);
            let out: Vec<f64> = x.data().chunks(c).flat_map(|r| r[start..end].iter().copied()).collect();
            Tensor::new(vec![x.rows(), end - start], out)
        };
        self.tape.record(SliceCols { start, end }, &[self], value)
    }

    /// `y[i] = x[perm[i]]` reshaped to `shape`.
    pub fn permute(self, perm: Rc<Vec<usize>>, shape: Vec<usize>) -> Var<'t> {
        let value = {
            let x = self.value();
            let d = x.data();
            Tensor::new(shape, perm.iter().map(|&i| d[i]).collect())
        };
        self.tape.record(Permute { perm }, &[self], value)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let value = self.to_tensor().reshape(shape);
        self.tape.record(Reshape, &[self], value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let y = x.mul(x).sum();
        assert_eq!(y.item(), 14.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_writes_no_gradients() {
        let tape = Tape::new();
        let five = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(five).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(
            tape.backward(x),
            Err(crate::numerics::NumericsError::NonScalarRoot { numel: 2 })
        ));
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([1], vec![1000.0]));
        let y = x.exp().exp().sum();
        match tape.backward(y) {
            Err(crate::numerics::NumericsError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected fault, got {other:?}"),
        }
    }

    #[test]
    fn zero_seed_gives_exactly_zero_leaf_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([2, 2], vec![0.3, -1.0, 2.0, 0.5]));
        let w = tape.leaf(Tensor::new([2, 2], vec![1.0, 2.0, -0.5, 0.1]));
        let y = x.matmul(w).gelu().softmax_rows();
        let g = tape.backward_with_seed(y, &[0.0; 4]).unwrap();
        assert!(g.wrt(x).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.wrt(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_use_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.add(x).add(x).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[3.0]);
    }

    #[test]
    fn attention_rows_only_see_allowed_columns() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64).sin()));
        let k = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64 * 0.7).cos()));
        let v = tape.constant(Tensor::from_fn([3, 4], |i| i as f64));
        // Row 0 sees only column 0, so its output is v[0].
        let pattern = Rc::new(AttnPattern::from_fn(3, 3, |i, j| j <= i));
        let out = q.attention(k, v, pattern, 2).to_tensor();
        assert_eq!(out.row(0), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn slicing_and_concat_invert() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([3, 5], |i| i as f64));
        let a = x.slice_cols(0, 2);
        let b = x.slice_cols(2, 5);
        let y = Var::concat_cols(&[a, b]);
        assert_eq!(y.to_tensor(), x.to_tensor());
    }
}

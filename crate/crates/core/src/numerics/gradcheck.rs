//! Central-difference verification of tape gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::ops::{AttnPattern, RopeTable};
use super::tape::{ExecMode, NumericsError, Tape, Var};
use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub numel: usize,
    /// Probes skipped because the difference quotient straddles a jump.
    pub kinks: usize,
    pub pass: bool,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("`{0}` is not deterministic under a fixed input")]
    Nondeterministic(String),
    #[error("`{op}` failed to differentiate: {source}")]
    Numerics {
        op: String,
        #[source]
        source: NumericsError,
    },
}

type EvalFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

/// A differentiable function plus a sampler for valid inputs.
///
/// The sampler is responsible for staying clear of non-smooth points of the
/// op (clamp bounds, zero for `abs`, depth-order ties in the renderer).
pub struct GradCase {
    pub name: String,
    sample: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    eval: Box<EvalFn>,
    probes: Option<usize>,
    screen_kinks: bool,
}

/// Largest fraction of probes that may be screened out as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.05;

impl GradCase {
    pub fn new<S, F>(name: impl Into<String>, sample: S, eval: F) -> Self
    where
        S: Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'static,
    {
        Self {
            name: name.into(),
            sample: Box::new(sample),
            eval: Box::new(eval),
            probes: None,
            screen_kinks: false,
        }
    }

    /// For piecewise-smooth functions: probes whose central differences at
    /// `eps` and `eps / 2` disagree are counted as kinks and left out of the
    /// error, up to [`MAX_KINK_FRACTION`] of all probes.
    pub fn with_kink_screen(mut self) -> Self {
        self.screen_kinks = true;
        self
    }

    /// Checks at most `n` randomly chosen elements of each input per seed,
    /// for cases too large to difference exhaustively.
    pub fn with_probes(mut self, n: usize) -> Self {
        self.probes = Some(n);
        self
    }

    pub fn sample(&self, seed: u64) -> Vec<Tensor> {
        (self.sample)(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Primitives the case records on a tape.
    pub fn op_names(&self) -> std::collections::BTreeSet<&'static str> {
        let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
        let vars: Vec<Var> = self.sample(0).into_iter().map(|t| tape.leaf(t)).collect();
        (self.eval)(&tape, &vars);
        tape.op_names()
    }

    /// Runs the check on inputs drawn from `seed`.
    pub fn check(&self, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport, GradCheckError> {
        let inputs = self.sample(seed);
        let probes = self.probes.map(|n| (n, seed));
        check_inputs(&self.name, &inputs, &*self.eval, eps, tol, probes, self.screen_kinks)
    }

    /// Worst report over `seeds` consecutive seeds starting at `first`.
    pub fn check_seeds(
        &self,
        first: u64,
        seeds: u64,
        eps: f64,
        tol: f64,
    ) -> Result<GradCheckReport, GradCheckError> {
        let mut worst: Option<GradCheckReport> = None;
        let (mut numel, mut kinks, mut pass) = (0, 0, true);
        for s in first..first + seeds {
            let r = self.check(s, eps, tol)?;
            (numel, kinks, pass) = (numel + r.numel, kinks + r.kinks, pass && r.pass);
            if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                worst = Some(r);
            }
        }
        let mut w = worst.expect("at least one seed");
        (w.numel, w.kinks, w.pass) = (numel, kinks, pass);
        Ok(w)
    }
}

fn evaluate(inputs: &[Tensor], eval: &EvalFn) -> Tensor {
    let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    eval(&tape, &vars).to_tensor()
}

/// Compares the tape's vector-Jacobian product against central differences
/// of `<w, f(x)>` for a fixed pseudo-random projection `w`.
pub fn grad_check(
    name: &str,
    inputs: &[Tensor],
    eval: &EvalFn,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError> {
    check_inputs(name, inputs, eval, eps, tol, None, false)
}

fn check_inputs(
    name: &str,
    inputs: &[Tensor],
    eval: &EvalFn,
    eps: f64,
    tol: f64,
    probes: Option<(usize, u64)>,
    screen_kinks: bool,
) -> Result<GradCheckReport, GradCheckError> {
    let tape = Tape::with_mode(ExecMode::DETERMINISTIC);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = eval(&tape, &vars);
    let y = out.to_tensor();
    if evaluate(inputs, eval) != y {
        return Err(GradCheckError::Nondeterministic(name.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = tape
        .backward_with_seed(out, &w)
        .map_err(|source| GradCheckError::Numerics {
            op: name.to_string(),
            source,
        })?;
    let project = |t: &Tensor| -> f64 { t.data().iter().zip(&w).map(|(a, b)| a * b).sum() };

    let mut max_rel_err: f64 = 0.0;
    let mut numel = 0;
    let mut kinks = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let all: Vec<usize> = (0..inputs[i].numel()).collect();
        let picked = match probes {
            Some((n, seed)) if n < all.len() => {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                rand::seq::index::sample(&mut r, all.len(), n).into_vec()
            }
            _ => all,
        };
        for j in picked {
            let mut central = |h: f64| {
                let x0 = inputs[i].data()[j];
                probe[i].data_mut()[j] = x0 + h;
                let fp = project(&evaluate(&probe, eval));
                probe[i].data_mut()[j] = x0 - h;
                let fm = project(&evaluate(&probe, eval));
                probe[i].data_mut()[j] = x0;
                (fp - fm) / (2.0 * h)
            };
            let fd = central(eps);
            numel += 1;
            if screen_kinks {
                let half = central(eps / 2.0);
                // Smooth functions agree to O(eps^2); a jump of size J
                // shows up as J / (2 eps) and J / eps.
                if (fd - half).abs() > 0.1 * tol * half.abs().max(1.0) {
                    kinks += 1;
                    continue;
                }
            }
            let err = (analytic[j] - fd).abs() / fd.abs().max(1.0);
            max_rel_err = max_rel_err.max(err);
        }
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err,
        numel,
        kinks,
        pass: max_rel_err < tol && kinks as f64 <= MAX_KINK_FRACTION * numel as f64,
    })
}

// ── samplers ────────────────────────────────────────────────────────────

pub fn uniform(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in `[lo, hi]` but never within `gap` of any point in `avoid`.
pub fn uniform_avoiding(
    rng: &mut impl Rng,
    shape: impl Into<Vec<usize>>,
    lo: f64,
    hi: f64,
    avoid: &[f64],
    gap: f64,
) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(lo..hi);
        if avoid.iter().all(|a| (v - a).abs() > gap) {
            break v;
        }
    })
}

fn rope_for(rows: usize, pairs: usize) -> Rc<RopeTable> {
    let angles: Vec<f64> = (0..rows * pairs).map(|i| 0.3 * i as f64 + 0.1).collect();
    Rc::new(RopeTable::from_angles(pairs, &angles))
}

/// Cases covering every primitive defined in this module.
pub fn cases() -> Vec<GradCase> {
    let mut v = vec![
        GradCase::new(
            "add",
            |r| vec![uniform(r, [3, 4], -2.0, 2.0), uniform(r, [3, 4], -2.0, 2.0)],
            |_, x| x[0].add(x[1]),
        ),
        GradCase::new(
            "sub",
            |r| vec![uniform(r, [3, 4], -2.0, 2.0), uniform(r, [3, 4], -2.0, 2.0)],
            |_, x| x[0].sub(x[1]),
        ),
        GradCase::new(
            "mul",
            |r| vec![uniform(r, [3, 4], -2.0, 2.0), uniform(r, [3, 4], -2.0, 2.0)],
            |_, x| x[0].mul(x[1]),
        ),
        GradCase::new(
            "add_rows",
            |r| vec![uniform(r, [6, 3], -2.0, 2.0), uniform(r, [2, 3], -2.0, 2.0)],
            |_, x| x[0].add_rows(x[1]),
        ),
        GradCase::new(
            "mul_rows",
            |r| vec![uniform(r, [6, 3], -2.0, 2.0), uniform(r, [3, 3], -2.0, 2.0)],
            |_, x| x[0].mul_rows(x[1]),
        ),
        GradCase::new("scale", |r| vec![uniform(r, [5], -2.0, 2.0)], |_, x| x[0].scale(-1.7)),
        GradCase::new("add_scalar", |r| vec![uniform(r, [5], -2.0, 2.0)], |_, x| x[0].add_scalar(0.3)),
        GradCase::new("gelu", |r| vec![uniform(r, [8], -3.0, 3.0)], |_, x| x[0].gelu()),
        GradCase::new("sigmoid", |r| vec![uniform(r, [8], -4.0, 4.0)], |_, x| x[0].sigmoid()),
        GradCase::new("exp", |r| vec![uniform(r, [8], -2.0, 2.0)], |_, x| x[0].exp()),
        GradCase::new("softplus", |r| vec![uniform(r, [8], -4.0, 4.0)], |_, x| x[0].softplus()),
        GradCase::new(
            "abs",
            |r| vec![uniform_avoiding(r, [8], -2.0, 2.0, &[0.0], 1e-3)],
            |_, x| x[0].abs(),
        ),
        GradCase::new(
            "clamp",
            |r| vec![uniform_avoiding(r, [8], -2.0, 2.0, &[-1.0, 1.0], 1e-3)],
            |_, x| x[0].clamp(-1.0, 1.0),
        ),
        GradCase::new(
            "matmul",
            |r| vec![uniform(r, [3, 4], -1.0, 1.0), uniform(r, [4, 5], -1.0, 1.0)],
            |_, x| x[0].matmul(x[1]),
        ),
        GradCase::new("sum", |r| vec![uniform(r, [2, 3], -1.0, 1.0)], |_, x| x[0].sum()),
        GradCase::new("mean", |r| vec![uniform(r, [2, 3], -1.0, 1.0)], |_, x| x[0].mean()),
        GradCase::new("row_norm", |r| vec![uniform(r, [3, 4], -1.0, 1.0)], |_, x| x[0].row_norm()),
        GradCase::new("softmax", |r| vec![uniform(r, [8], -3.0, 3.0)], |_, x| x[0].softmax_rows()),
        GradCase::new(
            "layer_norm",
            |r| vec![uniform(r, [3, 6], -2.0, 2.0)],
            |_, x| x[0].layer_norm(1e-6),
        ),
        GradCase::new(
            "normalize_rows",
            |r| vec![uniform(r, [3, 4], 0.2, 1.0)],
            |_, x| x[0].normalize_rows(),
        ),
        GradCase::new(
            "attention",
            |r| {
                vec![
                    uniform(r, [5, 8], -1.0, 1.0),
                    uniform(r, [5, 8], -1.0, 1.0),
                    uniform(r, [5, 8], -1.0, 1.0),
                ]
            },
            |_, x| {
                let pattern = Rc::new(AttnPattern::from_fn(5, 5, |i, j| j <= i || (i + j) % 3 == 0));
                x[0].attention(x[1], x[2], pattern, 2)
            },
        ),
        GradCase::new(
            "rotary",
            |r| vec![uniform(r, [3, 8], -1.0, 1.0)],
            |_, x| x[0].rotary(rope_for(3, 2), 2),
        ),
        GradCase::new(
            "gather_rows",
            |r| vec![uniform(r, [4, 3], -1.0, 1.0)],
            |_, x| x[0].gather_rows(Rc::new(vec![2, 0, 2, 3])),
        ),
        GradCase::new(
            "concat_rows",
            |r| vec![uniform(r, [2, 3], -1.0, 1.0), uniform(r, [1, 3], -1.0, 1.0)],
            |_, x| Var::concat_rows(&[x[0], x[1]]),
        ),
        GradCase::new(
            "concat_cols",
            |r| vec![uniform(r, [2, 3], -1.0, 1.0), uniform(r, [2, 1], -1.0, 1.0)],
            |_, x| Var::concat_cols(&[x[0], x[1]]),
        ),
        GradCase::new(
            "slice_cols",
            |r| vec![uniform(r, [3, 5], -1.0, 1.0)],
            |_, x| x[0].slice_cols(1, 4),
        ),
        GradCase::new(
            "permute",
            |r| vec![uniform(r, [6], -1.0, 1.0)],
            |_, x| x[0].permute(Rc::new(vec![5, 3, 1, 0, 0, 2]), vec![3, 2]),
        ),
        GradCase::new(
            "reshape",
            |r| vec![uniform(r, [2, 3], -1.0, 1.0)],
            |_, x| x[0].reshape(vec![3, 2]),
        ),
    ];
    // A composite that chains several ops, so that accumulation across a
    // deeper graph is exercised too.
    v.push(GradCase::new(
        "mlp_composite",
        |r| {
            vec![
                uniform(r, [4, 6], -1.0, 1.0),
                uniform(r, [6, 6], -0.5, 0.5),
                uniform(r, [1, 6], -0.5, 0.5),
            ]
        },
        |_, x| {
            let h = x[0].layer_norm(1e-6).linear(x[1], x[2]).gelu();
            h.add(x[0]).softmax_rows().square().mean()
        },
    ));
    v
}

//! Parameterized layers shared by the encoder, decoder and heads.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Binds stored parameters onto one tape, once each.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    cache: RefCell<HashMap<ParamId, Var<'t>>>,
    trainable: bool,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            cache: RefCell::new(HashMap::new()),
            trainable: true,
        }
    }

    /// Parameters become constants; no gradient is recorded for them.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    /// Uses the given variables in place of stored values, e.g. for
    /// finite-difference checks over parameters.
    pub fn with_vars(tape: &'t Tape, store: &'s ParamStore, vars: impl IntoIterator<Item = (ParamId, Var<'t>)>) -> Self {
        let b = Self::new(tape, store);
        b.cache.borrow_mut().extend(vars);
        b
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        *self.cache.borrow_mut().entry(id).or_insert_with(|| {
            if self.trainable {
                self.tape.param(self.store, id)
            } else {
                self.tape.constant(self.store.value(id).clone())
            }
        })
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
}

pub fn init_tensor(rng: &mut impl Rng, shape: [usize; 2], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Xavier => {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).unwrap();
            Tensor::from_fn(shape, |_| d.sample(rng))
        }
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_tensor(rng, [fan_in, fan_out], init)),
            b: store.add(format!("{name}.b"), Tensor::zeros([1, fan_out])),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.linear(p.get(self.w), p.get(self.b))
    }
}

/// Layer normalization with a learned per-channel gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([1, width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([1, width])),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(LN_EPS).mul_rows(p.get(self.gain)).add_rows(p.get(self.bias))
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, Init::Xavier, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, Init::Xavier, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.down.forward(p, self.up.forward(p, x).gelu())
    }
}

use serde::{Deserialize, Serialize};

use crate::model::Checkpoint;
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with per-parameter step counts, so parameters that receive no
/// gradient in a phase are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |id| Tensor::zeros(store.value(id).shape().to_vec());
        Self {
            config,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            t: vec![0; store.len()],
        }
    }

    /// Applies accumulated gradients to the parameters in `active` and
    /// returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, active: &[ParamId], lr: f64) -> f64 {
        let c = self.config;
        let norm = active
            .iter()
            .flat_map(|&id| store.grad(id).data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        for &id in active {
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (b1c, b2c) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
            let wd = if decays(store.name(id)) { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (value, grad) = store.value_and_grad_mut(id);
            for (k, (x, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g * scale;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = (m[k] / b1c) / ((v[k] / b2c).sqrt() + c.eps);
                *x -= lr * (update + wd * *x);
            }
        }
        norm
    }

    pub fn save(&self, store: &ParamStore, ck: &mut Checkpoint) {
        for id in store.ids() {
            let (name, i) = (store.name(id), id.index());
            ck.insert(format!("optim.m.{name}"), self.m[i].clone());
            ck.insert(format!("optim.v.{name}"), self.v[i].clone());
            ck.insert(format!("optim.t.{name}"), Tensor::new(vec![1, 1], vec![self.t[i] as f64]));
        }
    }

    /// Restores moments by parameter name; missing entries are an error.
    pub fn load(config: AdamWConfig, store: &ParamStore, ck: &Checkpoint) -> Result<Self, String> {
        let mut s = Self::new(config, store);
        for id in store.ids() {
            let (name, i) = (store.name(id), id.index());
            let get = |k: &str| {
                ck.tensor(&format!("optim.{k}.{name}"))
                    .cloned()
                    .ok_or_else(|| format!("checkpoint lacks optimizer state for `{name}`"))
            };
            s.m[i] = get("m")?;
            s.v[i] = get("v")?;
            s.t[i] = get("t")?.data()[0] as u64;
        }
        Ok(s)
    }
}

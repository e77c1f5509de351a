use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    /// One bias-corrected update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Checkpoint entries `adam.m.<param>` and `adam.v.<param>`.
    pub fn entries<'a>(&'a self, store: &'a ParamStore) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            out.push((format!("adam.m.{}", p.name), m));
            out.push((format!("adam.v.{}", p.name), v));
        }
        out
    }

    /// Restores moments from checkpoint entries written by [`Adam::entries`].
    pub fn from_entries(store: &ParamStore, entries: &[(String, Tensor)], step: u64) -> Result<Self, String> {
        let find = |key: String, shape: &[usize]| -> Result<Tensor, String> {
            let (_, t) = entries.iter().find(|(n, _)| *n == key).ok_or_else(|| format!("missing {key}"))?;
            if t.shape() != shape {
                return Err(format!("{key} has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t.clone())
        };
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for p in store.iter() {
            m.push(find(format!("adam.m.{}", p.name), p.value.shape())?);
            v.push(find(format!("adam.v.{}", p.name), p.value.shape())?);
        }
        Ok(Self { m, v, step })
    }
}

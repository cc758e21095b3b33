//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for every parameter in a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of the parameters in `ids` from their accumulated `grad`
    /// buffers. Parameters not listed are neither decayed nor moved.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(
                "adamw_step",
                format!(
                    "state holds {} moments, store has {} parameters",
                    self.m.len(),
                    store.len()
                ),
            ));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for &id in ids {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::shape("adamw_step", p.value.shape(), m.shape()));
            }
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in it {
                let g = g as f64;
                let mut x = *w as f64;
                x -= lr * weight_decay * x;
                let m_new = beta1 * *m as f64 + (1.0 - beta1) * g;
                let v_new = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                x -= lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *m = m_new as f32;
                *v = v_new as f32;
                *w = x as f32;
            }
        }
        Ok(())
    }
}

//! Adam with bias correction, plus the gradient clip applied before each step.

use super::store::{GradStore, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates, flattened in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let n = store.total_len();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter. Moments and parameters stay aligned
    /// because both iterate the store in insertion order.
    pub fn step(&mut self, cfg: &AdamConfig, store: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut off = 0;
        for id in store.ids() {
            let g = grads.get(id).data();
            let p = store.value_mut(id).data_mut();
            for (i, (&gi, pi)) in g.iter().zip(p.iter_mut()).enumerate() {
                let m = &mut self.m[off + i];
                let v = &mut self.v[off + i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *pi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
            off += g.len();
        }
    }
}

/// Clamps every gradient component into `[-bound, bound]`.
pub fn clip_gradients(grads: &mut GradStore, bound: f64) {
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v = v.clamp(-bound, bound);
        }
    }
}

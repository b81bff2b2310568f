use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::Result;

/// AdamW hyperparameters. Defaults follow the image-generation training
/// recipe: betas (0.9, 0.95), weight decay 0.05, global-norm clip 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub step: u64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_norm: f64,
}

pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = store.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// One update of every parameter from its accumulated gradient.
    ///
    /// Order: global-norm clip, decoupled decay `p *= 1 - lr*wd`, moment
    /// update, then `p -= lr * m_hat / (sqrt(v_hat) + eps)` with
    /// bias-corrected `m_hat = m / (1 - beta1^t)`, `v_hat = v / (1 - beta2^t)`.
    /// Parameters without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepReport> {
        let c = self.config.clone();
        let grad_norm = match c.grad_clip {
            Some(max) => clip_grad_norm(store, max),
            None => store.grad_norm(),
        };
        let clipped_norm = store.grad_norm();
        if self.state.m.len() != store.len() {
            self.state.m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let decay = store.decays(id);
            let p = store.get_mut(id);
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
            let (m, v) = (&mut self.state.m[id.index()], &mut self.state.v[id.index()]);
            let data = p.data_mut();
            for i in 0..data.len() {
                if decay {
                    data[i] *= 1.0 - c.lr * c.weight_decay;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(StepReport {
            step: self.state.step,
            grad_norm,
            clipped_norm,
        })
    }
}

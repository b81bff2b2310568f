use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::kernels::softmax_in_place;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Guidance scale `s`; 1 disables the unconditional branch.
    pub cfg_scale: f64,
    /// Keep the `top_k` largest logits; 0 keeps all.
    pub top_k: usize,
    /// Nucleus mass in `(0, 1]`.
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { cfg_scale: 2.0, top_k: 0, top_p: 1.0, temperature: 1.0, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.cfg_scale >= 0.0 && self.cfg_scale.is_finite(),
            Config,
            "cfg scale must be finite and >= 0, got {}",
            self.cfg_scale
        );
        ensure!(self.top_p > 0.0 && self.top_p <= 1.0, Config, "top_p must be in (0, 1], got {}", self.top_p);
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            Config,
            "temperature must be > 0, got {}",
            self.temperature
        );
        Ok(())
    }
}

/// `uncond + s * (cond - uncond)`, elementwise.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], s: f64) -> Result<Vec<f64>> {
    ensure!(cond.len() == uncond.len(), Dimension, "cfg_combine: {} vs {} logits", cond.len(), uncond.len());
    if s == 1.0 {
        return Ok(cond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(c, u)| u + s * (c - u)).collect())
}

/// Indices by descending value, ties to the lower index.
fn ranked(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx
}

/// Temperature, then top-k, then top-p. Removed entries become `-inf`.
pub fn filter_logits(logits: &[f64], config: &SamplingConfig) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|l| l / config.temperature).collect();
    let k = out.len();
    if k == 0 {
        return out;
    }
    let order = ranked(&out);
    let mut keep = if config.top_k == 0 { k } else { config.top_k.min(k) };
    if config.top_p < 1.0 {
        let mut probs: Vec<f64> = order[..keep].iter().map(|&i| out[i]).collect();
        softmax_in_place(&mut probs);
        let mut mass = 0.0;
        let mut n = 0;
        for p in probs {
            mass += p;
            n += 1;
            if mass >= config.top_p {
                break;
            }
        }
        keep = n;
    }
    for &i in &order[keep..] {
        out[i] = f64::NEG_INFINITY;
    }
    debug_assert!(out.iter().any(|v| v.is_finite()), "filter removed every token");
    out
}

/// One categorical draw from the softmax of `filtered` using a single
/// uniform variate and a cumulative scan.
pub fn sample_token(filtered: &[f64], rng: &mut Rng) -> usize {
    let mut p = filtered.to_vec();
    softmax_in_place(&mut p);
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

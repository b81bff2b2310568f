use super::condition::Condition;
use super::config::ModelConfig;
use super::model::ArModel;
use crate::error::{ensure, Error, Result};
use crate::numerics::kernels::{matmul_slices, rms_norm_rows, rotate_pairs, silu, softmax_in_place};
use crate::numerics::{Tape, Tensor};

/// Per-layer keys and values, each `[batch, heads, max_len, head_dim]`.
#[derive(Clone, Debug)]
pub struct KVCache {
    batch: usize,
    heads: usize,
    head_dim: usize,
    max_len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    filled: Vec<usize>,
}

impl KVCache {
    pub fn new(config: &ModelConfig, batch: usize) -> Self {
        let (heads, hd, max_len) = (config.heads, config.head_dim(), config.max_len());
        let size = batch * heads * max_len * hd;
        Self {
            batch,
            heads,
            head_dim: hd,
            max_len,
            keys: vec![vec![0.0; size]; config.layers],
            values: vec![vec![0.0; size]; config.layers],
            filled: vec![0; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn filled_len(&self, row: usize) -> usize {
        self.filled[row]
    }

    pub fn reset(&mut self) {
        self.filled.iter_mut().for_each(|f| *f = 0);
    }

    fn slot(&self, b: usize, h: usize, pos: usize) -> usize {
        ((b * self.heads + h) * self.max_len + pos) * self.head_dim
    }
}

impl ArModel {
    fn check_cache(&self, cache: &KVCache, rows: usize) -> Result<()> {
        let c = &self.config;
        ensure!(
            cache.keys.len() == c.layers && cache.heads == c.heads && cache.head_dim == c.head_dim() && cache.max_len == c.max_len(),
            Config,
            "cache was built for a different model"
        );
        ensure!(rows == cache.batch, Dimension, "{} inputs for a cache of batch {}", rows, cache.batch);
        Ok(())
    }

    /// Writes the condition prefix into an empty cache and returns the
    /// logits for the first image token, `[batch, K]`.
    pub fn prefill(&self, conds: &[Condition], cache: &mut KVCache) -> Result<Tensor> {
        self.check_cache(cache, conds.len())?;
        ensure!(cache.filled.iter().all(|&f| f == 0), Capacity, "prefill needs an empty cache");
        let mut tape = Tape::new();
        let e = self.embed_conditions(&mut tape, conds, false)?;
        let x = tape.value(e).data().to_vec();
        self.extend(x, self.config.cond_len(), cache)
    }

    /// Appends one token per row and returns next-token logits `[batch, K]`.
    pub fn forward_step(&self, tokens: &[u32], cache: &mut KVCache) -> Result<Tensor> {
        self.check_cache(cache, tokens.len())?;
        let (d, k) = (self.config.hidden, self.config.vocab);
        let table = self.params.get(self.tok_emb).data();
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= k {
                return Err(Error::Index(format!("token {t} out of range for vocabulary {k}")));
            }
            x.extend_from_slice(&table[t as usize * d..(t as usize + 1) * d]);
        }
        self.extend(x, 1, cache)
    }

    /// Runs `t` new positions per row through every layer, appending to the
    /// cache, and returns the head output of each row's last position.
    fn extend(&self, mut x: Vec<f64>, t: usize, cache: &mut KVCache) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, d, heads, hd, f) = (cache.batch, cfg.hidden, cfg.heads, cfg.head_dim(), cfg.ffn_hidden);
        for (row, &filled) in cache.filled.iter().enumerate() {
            if filled + t > cache.max_len {
                return Err(Error::Capacity(format!(
                    "row {row}: {filled} filled + {t} new exceeds cache length {}",
                    cache.max_len
                )));
            }
        }
        let rows = b * t;
        let scale = 1.0 / (hd as f64).sqrt();
        let half = hd / 2;
        let w = |id| self.params.get(id).data();
        let mut a = vec![0.0; rows * d];
        for (li, l) in self.layers.iter().enumerate() {
            rms_norm_rows(&x, w(l.attn_norm), cfg.norm_eps, &mut a);
            let mut q = matmul_slices(&a, w(l.wq), rows, d, d);
            let mut kk = matmul_slices(&a, w(l.wk), rows, d, d);
            let v = matmul_slices(&a, w(l.wv), rows, d, d);
            let mut att = vec![0.0; rows * d];
            for bi in 0..b {
                let base = cache.filled[bi];
                for i in 0..t {
                    let pos = base + i;
                    let r = bi * t + i;
                    let ang = &self.angles[pos * half..(pos + 1) * half];
                    for h in 0..heads {
                        let off = r * d + h * hd;
                        rotate_pairs(&mut q[off..off + hd], ang, false);
                        rotate_pairs(&mut kk[off..off + hd], ang, false);
                        let s = cache.slot(bi, h, pos);
                        cache.keys[li][s..s + hd].copy_from_slice(&kk[off..off + hd]);
                        cache.values[li][s..s + hd].copy_from_slice(&v[off..off + hd]);
                    }
                }
                for i in 0..t {
                    let pos = base + i;
                    let r = bi * t + i;
                    for h in 0..heads {
                        let off = r * d + h * hd;
                        let qh = &q[off..off + hd];
                        let s0 = cache.slot(bi, h, 0);
                        let keys = &cache.keys[li][s0..s0 + (pos + 1) * hd];
                        let vals = &cache.values[li][s0..s0 + (pos + 1) * hd];
                        let mut p: Vec<f64> = keys
                            .chunks_exact(hd)
                            .map(|kr| kr.iter().zip(qh).map(|(a, b)| a * b).sum::<f64>() * scale)
                            .collect();
                        softmax_in_place(&mut p);
                        let out = &mut att[off..off + hd];
                        for (pj, vr) in p.iter().zip(vals.chunks_exact(hd)) {
                            for (o, vv) in out.iter_mut().zip(vr) {
                                *o += pj * vv;
                            }
                        }
                    }
                }
            }
            let o = matmul_slices(&att, w(l.wo), rows, d, d);
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);

            rms_norm_rows(&x, w(l.ffn_norm), cfg.norm_eps, &mut a);
            let gate = matmul_slices(&a, w(l.w_gate), rows, d, f);
            let up = matmul_slices(&a, w(l.w_up), rows, d, f);
            let mid: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let o = matmul_slices(&mid, w(l.w_down), rows, f, d);
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);
        }
        cache.filled.iter_mut().for_each(|fl| *fl += t);
        let last: Vec<f64> = (0..b).flat_map(|bi| x[((bi + 1) * t - 1) * d..(bi + 1) * t * d].to_vec()).collect();
        let mut normed = vec![0.0; b * d];
        rms_norm_rows(&last, w(self.final_norm), cfg.norm_eps, &mut normed);
        let logits = matmul_slices(&normed, w(self.head), b, d, cfg.vocab);
        Tensor::new(&[b, cfg.vocab], logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn capacity_is_enforced() {
        let mut cfg = ModelConfig::preset("nano").unwrap();
        cfg.grid_h = 2;
        cfg.grid_w = 2;
        let m = ArModel::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let mut c = KVCache::new(&cfg, 1);
        m.prefill(&[Condition::Class(0)], &mut c).unwrap();
        for t in 0..4 {
            m.forward_step(&[t], &mut c).unwrap();
        }
        assert_eq!(c.filled_len(0), 5);
        assert!(matches!(m.forward_step(&[0], &mut c), Err(Error::Capacity(_))));
        assert!(matches!(m.prefill(&[Condition::Class(0)], &mut c), Err(Error::Capacity(_))));
    }

    #[test]
    fn step_matches_full_forward() {
        let cfg = ModelConfig::preset("nano").unwrap();
        let m = ArModel::new(cfg.clone(), &mut Rng::new(5)).unwrap();
        let toks: Vec<u32> = (0..64).map(|i| (i * 11 % 64) as u32).collect();
        let full = m.forward_full(&toks, &Condition::Class(4)).unwrap();
        let mut c = KVCache::new(&cfg, 1);
        let mut rows = vec![m.prefill(&[Condition::Class(4)], &mut c).unwrap()];
        for &t in &toks[..63] {
            rows.push(m.forward_step(&[t], &mut c).unwrap());
        }
        for (i, r) in rows.iter().enumerate() {
            let diff = r.data().iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-8, "position {i}: {diff}");
        }
    }
}

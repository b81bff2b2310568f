use super::filter::{cfg_combine, filter_logits, sample_token, SamplingConfig};
use crate::armodel::{ArModel, Condition, KVCache};
use crate::error::{ensure, Result};
use crate::numerics::{Tape, Tensor};
use crate::rng::Rng;
use crate::tokenizer::TokenGrid;

/// How logits are produced at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Key/value cache, one new position per step.
    Cached,
    /// Full recompute of the prefix at every step.
    Naive,
}

/// Seed for batch row `row`: `seed ^ row`.
pub fn row_seed(seed: u64, row: usize) -> u64 {
    seed ^ row as u64
}

pub fn generate(model: &ArModel, cond: &Condition, config: &SamplingConfig) -> Result<TokenGrid> {
    generate_with(model, cond, config, DecodeMode::Cached)
}

pub fn generate_with(model: &ArModel, cond: &Condition, config: &SamplingConfig, mode: DecodeMode) -> Result<TokenGrid> {
    Ok(batch_generate_with(model, std::slice::from_ref(cond), config, mode)?.remove(0))
}

pub fn batch_generate(model: &ArModel, conds: &[Condition], config: &SamplingConfig) -> Result<Vec<TokenGrid>> {
    batch_generate_with(model, conds, config, DecodeMode::Cached)
}

/// Generates one grid per condition. With `cfg_scale != 1` the model runs
/// `2 * conds.len()` rows: conditional rows first, then null rows.
pub fn batch_generate_with(
    model: &ArModel,
    conds: &[Condition],
    config: &SamplingConfig,
    mode: DecodeMode,
) -> Result<Vec<TokenGrid>> {
    config.validate()?;
    let b = conds.len();
    ensure!(b > 0, Dimension, "no conditions to generate from");
    let mc = &model.config;
    let (n, k) = (mc.seq_tokens(), mc.vocab);
    let guided = config.cfg_scale != 1.0;
    let mut rows: Vec<Condition> = conds.to_vec();
    if guided {
        rows.extend(std::iter::repeat(Condition::Null).take(b));
    }
    let mut rngs: Vec<Rng> = (0..b).map(|i| Rng::new(row_seed(config.seed, i))).collect();
    let mut seqs: Vec<Vec<u32>> = vec![Vec::with_capacity(n); b];

    let mut cache = match mode {
        DecodeMode::Cached => Some(KVCache::new(mc, rows.len())),
        DecodeMode::Naive => None,
    };
    let mut logits = match cache.as_mut() {
        Some(c) => model.prefill(&rows, c)?,
        None => naive_logits(model, &rows, &[])?,
    };
    for step in 0..n {
        let mut next = Vec::with_capacity(rows.len());
        for i in 0..b {
            let fused = if guided {
                cfg_combine(logits.row(i), logits.row(b + i), config.cfg_scale)?
            } else {
                logits.row(i).to_vec()
            };
            let tok = sample_token(&filter_logits(&fused, config), &mut rngs[i]) as u32;
            debug_assert!((tok as usize) < k);
            seqs[i].push(tok);
            next.push(tok);
        }
        if guided {
            next.extend_from_within(..);
        }
        if step + 1 == n {
            break;
        }
        logits = match cache.as_mut() {
            Some(c) => model.forward_step(&next, c)?,
            None => {
                let prefixes: Vec<&[u32]> = (0..rows.len()).map(|r| seqs[r % b].as_slice()).collect();
                naive_logits(model, &rows, &prefixes)?
            }
        };
    }
    let (h, w) = (mc.grid_h, mc.grid_w);
    seqs.into_iter().map(|s| TokenGrid::new(h, w, s)).collect()
}

/// Last-position logits `[rows, K]` from one batched forward over every
/// full prefix. All prefixes have the same length.
fn naive_logits(model: &ArModel, conds: &[Condition], prefixes: &[&[u32]]) -> Result<Tensor> {
    let k = model.config.vocab;
    let n = prefixes.first().map_or(0, |p| p.len());
    let tokens: Vec<Vec<u32>> = (0..conds.len())
        .map(|r| prefixes.get(r).map_or_else(Vec::new, |p| p.to_vec()))
        .collect();
    let mut tape = Tape::new();
    let logits = model.forward_tape(&mut tape, &tokens, conds, None, false)?;
    let all = tape.value(logits);
    let mut out = Vec::with_capacity(conds.len() * k);
    for r in 0..conds.len() {
        out.extend_from_slice(all.row(r * (n + 1) + n));
    }
    Tensor::new(&[conds.len(), k], out)
}

//! Decode-throughput benchmark: full-prefix recompute against the
//! key/value cache on identical sampling work.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::armodel::{ArModel, Condition};
use crate::error::{ensure, Error, Result};
use crate::pipeline::write_csv;
use crate::sampler::{batch_generate_with, DecodeMode, SamplingConfig};
use crate::tokenizer::TokenGrid;

/// Untimed runs before measurement.
pub const WARMUP: usize = 2;

#[derive(Clone, Debug)]
pub struct DecodeTiming {
    pub mode: DecodeMode,
    /// Wall seconds of each timed repeat.
    pub seconds: Vec<f64>,
    pub median_sec: f64,
    pub grids: Vec<TokenGrid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub params: usize,
    pub naive_sec: f64,
    pub cached_sec: f64,
    /// `naive_sec / cached_sec`.
    pub speedup_ratio: f64,
    /// Images per run; model rows double under guidance.
    pub batch: usize,
    pub grid: (usize, usize),
    pub seed: u64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    params: usize,
    mode: &'a str,
    median_sec: f64,
    speedup_ratio: f64,
    batch: usize,
    grid_h: usize,
    grid_w: usize,
    seed: u64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Class conditions `0, 1, ...` cycling through the model's classes.
pub fn bench_conditions(model: &ArModel, batch: usize) -> Vec<Condition> {
    match model.config.conditioning {
        crate::armodel::Conditioning::Class { num_classes } => (0..batch).map(|i| Condition::Class(i % num_classes)).collect(),
        crate::armodel::Conditioning::Text { .. } => vec![Condition::Null; batch],
    }
}

fn timed(model: &ArModel, conds: &[Condition], sampling: &SamplingConfig, mode: DecodeMode) -> Result<(f64, Vec<TokenGrid>)> {
    let t = Instant::now();
    let g = batch_generate_with(model, conds, sampling, mode)?;
    Ok((t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE), g))
}

/// Times `repeats` complete generations after [`WARMUP`] untimed ones.
pub fn bench_decode(
    model: &ArModel,
    conds: &[Condition],
    sampling: &SamplingConfig,
    mode: DecodeMode,
    repeats: usize,
) -> Result<DecodeTiming> {
    ensure!(repeats >= 1, Config, "need at least one timed repeat");
    for _ in 0..WARMUP {
        batch_generate_with(model, conds, sampling, mode)?;
    }
    let mut seconds = Vec::with_capacity(repeats);
    let mut grids = Vec::new();
    for _ in 0..repeats {
        let (s, g) = timed(model, conds, sampling, mode)?;
        seconds.push(s);
        grids = g;
    }
    Ok(DecodeTiming { mode, median_sec: median(&seconds), seconds, grids })
}

/// Benchmarks both decode modes and checks they emit the same tokens.
///
/// Repeats alternate between the modes so slow drift in machine speed
/// affects both medians alike.
pub fn bench_model(name: &str, model: &ArModel, batch: usize, sampling: &SamplingConfig, repeats: usize) -> Result<BenchResult> {
    ensure!(repeats >= 1, Config, "need at least one timed repeat");
    let conds = bench_conditions(model, batch);
    for _ in 0..WARMUP {
        batch_generate_with(model, &conds, sampling, DecodeMode::Naive)?;
        batch_generate_with(model, &conds, sampling, DecodeMode::Cached)?;
    }
    let (mut naive, mut cached) = (Vec::with_capacity(repeats), Vec::with_capacity(repeats));
    for _ in 0..repeats {
        let (s, ng) = timed(model, &conds, sampling, DecodeMode::Naive)?;
        naive.push(s);
        let (s, cg) = timed(model, &conds, sampling, DecodeMode::Cached)?;
        cached.push(s);
        if ng != cg {
            return Err(Error::Divergence {
                step: 0,
                detail: format!("{name}: naive and cached decoding produced different tokens"),
            });
        }
    }
    let (naive_sec, cached_sec) = (median(&naive), median(&cached));
    Ok(BenchResult {
        model: name.to_string(),
        params: model.params.num_elements(),
        naive_sec,
        cached_sec,
        speedup_ratio: naive_sec / cached_sec,
        batch,
        grid: (model.config.grid_h, model.config.grid_w),
        seed: sampling.seed,
    })
}

/// One row per (model, mode); the naive row carries ratio 1.
pub fn write_bench_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    let mut rows = Vec::with_capacity(2 * results.len());
    for r in results {
        for (mode, sec, ratio) in [("naive", r.naive_sec, 1.0), ("cached", r.cached_sec, r.speedup_ratio)] {
            rows.push(CsvRow {
                model: &r.model,
                params: r.params,
                mode,
                median_sec: sec,
                speedup_ratio: ratio,
                batch: r.batch,
                grid_h: r.grid.0,
                grid_w: r.grid.1,
                seed: r.seed,
            });
        }
    }
    write_csv(path, &rows)
}

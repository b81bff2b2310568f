use std::collections::VecDeque;

use super::grid::TokenGrid;
use crate::error::{ensure, Error, Result};
use crate::numerics::tape::l2_normalize_row;
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Floor on the norm when dividing by it.
pub const NORM_EPS: f64 = 1e-12;

/// Fixed-capacity FIFO of recently emitted code indices.
#[derive(Clone, Debug)]
pub struct UsageQueue {
    capacity: usize,
    codebook_size: usize,
    buf: VecDeque<u32>,
}

impl UsageQueue {
    pub fn new(capacity: usize, codebook_size: usize) -> Self {
        Self {
            capacity,
            codebook_size,
            buf: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Appends indices, evicting the oldest beyond capacity.
    pub fn push(&mut self, indices: &[u32]) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= self.codebook_size) {
            return Err(Error::Index(format!(
                "code {bad} out of range for codebook of {}",
                self.codebook_size
            )));
        }
        for &i in indices {
            if self.buf.len() == self.capacity {
                self.buf.pop_front();
            }
            self.buf.push_back(i);
        }
        Ok(())
    }

    pub fn distinct(&self) -> usize {
        let mut seen = vec![false; self.codebook_size];
        self.buf.iter().filter(|&&i| !std::mem::replace(&mut seen[i as usize], true)).count()
    }

    /// Fraction of the codebook present in the queue.
    pub fn usage(&self) -> Result<f64> {
        if self.buf.is_empty() {
            return Err(Error::MetricNotReady("usage queue is empty".into()));
        }
        Ok(self.distinct() as f64 / self.codebook_size as f64)
    }
}

/// `K x C` code table plus its usage queue.
#[derive(Clone, Debug)]
pub struct Codebook {
    vectors: Tensor,
    pub usage: UsageQueue,
}

impl Codebook {
    pub fn new(vectors: Tensor, queue_capacity: usize) -> Result<Self> {
        ensure!(
            vectors.rank() == 2 && vectors.shape()[0] > 0 && vectors.shape()[1] > 0,
            Config,
            "codebook must be a non-empty K x C table, got {:?}",
            vectors.shape()
        );
        let k = vectors.shape()[0];
        Ok(Self {
            vectors,
            usage: UsageQueue::new(queue_capacity, k),
        })
    }

    /// Rows drawn uniformly on the unit sphere.
    pub fn uniform_sphere(k: usize, c: usize, queue_capacity: usize, rng: &mut Rng) -> Result<Self> {
        let mut cb = Self::new(Tensor::randn(&[k, c], 1.0, rng), queue_capacity)?;
        cb.normalize();
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Rescales every row to unit l2 norm.
    pub fn normalize(&mut self) {
        let w = self.vectors.shape()[1];
        normalize_rows(self.vectors.data_mut(), w);
    }

    /// Normalized copy of the table.
    pub fn normalized(&self) -> Vec<f64> {
        let mut v = self.vectors.data().to_vec();
        normalize_rows(&mut v, self.dim());
        v
    }
}

pub fn normalize_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        l2_normalize_row(row, NORM_EPS);
    }
}

/// Index of the row of `table` closest to `query` in squared l2 distance;
/// ties go to the lowest index.
pub fn nearest_code(query: &[f64], table: &[f64]) -> usize {
    let c = query.len();
    let mut best = (f64::INFINITY, 0);
    for (k, row) in table.chunks(c).enumerate() {
        let d: f64 = query.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Nearest normalized code for each normalized feature row.
pub fn assign_codes(features_normalized: &[f64], table_normalized: &[f64], c: usize) -> Vec<u32> {
    features_normalized
        .chunks(c)
        .map(|q| nearest_code(q, table_normalized) as u32)
        .collect()
}

#[derive(Clone, Debug)]
pub struct QuantizeResult {
    /// `[n, h, w, C]` normalized code vectors.
    pub z_q: Tensor,
    pub grids: Vec<TokenGrid>,
    /// Mean over positions of `||f - z||^2`.
    pub codebook_loss: f64,
    /// `beta` times the same distance.
    pub commit_loss: f64,
}

/// Maps each position of `features` (`[n, h, w, C]` or `[h, w, C]`) to its
/// nearest code after l2-normalizing both sides.
pub fn quantize(features: &Tensor, codebook: &Codebook, beta: f64) -> Result<QuantizeResult> {
    let s = features.shape();
    let (n, h, w, c) = match *s {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(Error::Dimension(format!("features must be [n,h,w,C], got {s:?}"))),
    };
    ensure!(
        c == codebook.dim(),
        Dimension,
        "feature dim {} != code dim {}",
        c,
        codebook.dim()
    );
    let mut f = features.data().to_vec();
    normalize_rows(&mut f, c);
    let table = codebook.normalized();
    let idx = assign_codes(&f, &table, c);
    let mut z = Vec::with_capacity(f.len());
    for &i in &idx {
        z.extend_from_slice(&table[i as usize * c..(i as usize + 1) * c]);
    }
    let positions = (n * h * w).max(1) as f64;
    let dist = f.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / positions;
    let grids = idx
        .chunks(h * w)
        .map(|g| TokenGrid::new(h, w, g.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizeResult {
        z_q: Tensor::new(&[n, h, w, c], z)?,
        grids,
        codebook_loss: dist,
        commit_loss: beta * dist,
    })
}

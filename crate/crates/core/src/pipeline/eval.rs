use std::path::Path;

use serde::Serialize;

use super::data::{select_images, SyntheticDataset};
use super::write_csv;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::tokenizer::{psnr, ssim, TokenGrid, Tokenizer, UsageQueue};

/// Anything that maps a batch of images to reconstructions, optionally
/// with the token grids it used.
pub trait Reconstructor {
    fn reconstruct_batch(&self, images: &Tensor) -> Result<(Tensor, Option<Vec<TokenGrid>>)>;

    /// Codebook size, when reconstructions go through a codebook.
    fn codebook_size(&self) -> Option<usize> {
        None
    }
}

impl Reconstructor for Tokenizer {
    fn reconstruct_batch(&self, images: &Tensor) -> Result<(Tensor, Option<Vec<TokenGrid>>)> {
        let (x, g) = self.reconstruct(images)?;
        Ok((x, Some(g)))
    }

    fn codebook_size(&self) -> Option<usize> {
        Some(self.config.codebook_size)
    }
}

/// Returns its input unchanged.
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct_batch(&self, images: &Tensor) -> Result<(Tensor, Option<Vec<TokenGrid>>)> {
        Ok((images.clone(), None))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub image: usize,
    pub label: u32,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Fraction of codes used across the whole split.
    pub usage: Option<f64>,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }
}

/// Per-image MSE, PSNR and SSIM over a held-out split, with code usage
/// measured over every emitted index.
pub fn eval_reconstruction(data: &SyntheticDataset, model: &dyn Reconstructor) -> Result<EvalReport> {
    let n = data.len();
    let mut rows = Vec::with_capacity(n);
    let mut queue = model.codebook_size().map(|k| UsageQueue::new(usize::MAX, k));
    const CHUNK: usize = 32;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let x = data.batch(&idx);
        let (xh, grids) = model.reconstruct_batch(&x)?;
        if let (Some(q), Some(gs)) = (queue.as_mut(), grids) {
            for g in gs {
                q.push(&g.indices)?;
            }
        }
        for (j, &i) in idx.iter().enumerate() {
            let a = select_images(&x, &[j]);
            let b = select_images(&xh, &[j]);
            let mse = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
            rows.push(EvalRow { image: i, label: data.labels[i], mse, psnr: psnr(&a, &b, 2.0)?, ssim: ssim(&a, &b, 2.0)? });
        }
    }
    let mean = |f: fn(&EvalRow) -> f64| if n == 0 { 0.0 } else { rows.iter().map(f).sum::<f64>() / n as f64 };
    Ok(EvalReport {
        mean_mse: mean(|r| r.mse),
        mean_psnr: mean(|r| r.psnr),
        mean_ssim: mean(|r| r.ssim),
        usage: match queue {
            Some(q) if !q.is_empty() => Some(q.usage()?),
            _ => None,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{make_synthetic, SyntheticConfig};

    #[test]
    fn identity_is_perfect() {
        let data = make_synthetic(&SyntheticConfig { images: 5, size: 16, ..Default::default() }).unwrap();
        let r = eval_reconstruction(&data, &IdentityReconstructor).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!(r.rows.iter().all(|row| row.ssim == 1.0 && row.mse == 0.0));
        assert_eq!(r.mean_ssim, 1.0);
        assert!(r.usage.is_none());
    }
}

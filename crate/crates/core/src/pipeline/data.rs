use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::tokenizer::pnm::{load_pnm, save_pnm};
use crate::tokenizer::{TokenDataset, Tokenizer};

/// Index file of a dataset directory.
pub const DATASET_INDEX: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    config: SyntheticConfig,
    files: Vec<String>,
    labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub images: usize,
    /// Square side in pixels.
    pub size: usize,
    pub classes: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { images: 500, size: 32, classes: 10, channels: 1, seed: 0 }
    }
}

/// Images `[n, c, s, s]` in `[-1, 1]` with one class label each.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub images: Tensor,
    pub labels: Vec<u32>,
}

/// Pattern family and spatial period for a class.
///
/// Families cycle stripes, checkerboard, ramp; every third class the
/// period grows and the stripe orientation flips. A class-dependent
/// brightness bias separates classes in mean pixel value.
fn class_style(class: usize, classes: usize) -> (usize, f64, f64) {
    let family = class % 3;
    let variant = class / 3;
    let period = 6.0 + 4.0 * variant as f64;
    let bias = if classes > 1 { -0.4 + 0.8 * class as f64 / (classes - 1) as f64 } else { 0.0 };
    (family, period, bias)
}

fn pattern(family: usize, variant: usize, period: f64, phase: f64, angle: f64, size: usize, y: usize, x: usize) -> f64 {
    let (fy, fx) = (y as f64, x as f64);
    match family {
        0 => {
            let t = if variant % 2 == 0 { fx } else { fy };
            (TAU * t / period + phase).sin()
        }
        1 => (TAU * fx / period + phase).sin() * (TAU * fy / period + angle).sin(),
        _ => {
            let c = (size as f64 - 1.0) / 2.0;
            (((fx - c) * angle.cos() + (fy - c) * angle.sin()) / c).clamp(-1.0, 1.0)
        }
    }
}

pub fn make_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    ensure!(config.classes > 0 && config.size > 0, Config, "need at least one class and a positive size");
    ensure!(matches!(config.channels, 1 | 3), Config, "channels must be 1 or 3");
    let (n, c, s) = (config.images, config.channels, config.size);
    let mut rng = Rng::new(config.seed);
    let mut data = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % config.classes;
        let (family, period, bias) = class_style(class, config.classes);
        let amp = rng.uniform_range(0.35, 0.55);
        let phase = rng.uniform_range(0.0, TAU);
        let angle = rng.uniform_range(0.0, TAU);
        for ch in 0..c {
            let tint = 1.0 - 0.2 * ch as f64;
            for y in 0..s {
                for x in 0..s {
                    let v = pattern(family, class / 3, period, phase, angle, s, y, x);
                    data.push((tint * (bias + amp * v)).clamp(-1.0, 1.0));
                }
            }
        }
        labels.push(class as u32);
    }
    Ok(SyntheticDataset { config: config.clone(), images: Tensor::new(&[n, c, s, s], data)?, labels })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the listed images into one batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        select_images(&self.images, idx)
    }

    /// Splits off the last `held_out` images.
    pub fn split(&self, held_out: usize) -> (SyntheticDataset, SyntheticDataset) {
        let n = self.len();
        let cut = n - held_out.min(n);
        let part = |r: std::ops::Range<usize>| {
            let idx: Vec<usize> = r.collect();
            SyntheticDataset {
                config: SyntheticConfig { images: idx.len(), ..self.config.clone() },
                images: select_images(&self.images, &idx),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
            }
        };
        (part(0..cut), part(cut..n))
    }
}

/// Writes one pixmap per image plus a `dataset.json` index.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if ds.config.channels == 1 { "pgm" } else { "ppm" };
    let mut files = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let name = format!("{i:05}.{ext}");
        save_pnm(&dir.join(&name), &ds.batch(&[i]))?;
        files.push(name);
    }
    let index = DatasetIndex { config: ds.config.clone(), files, labels: ds.labels.clone() };
    let path = dir.join(DATASET_INDEX);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`save_dataset`]. Pixel values come back
/// quantized to the 8-bit grid.
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let path = dir.join(DATASET_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    ensure!(index.files.len() == index.labels.len(), Format, "{} files for {} labels", index.files.len(), index.labels.len());
    let mut data = Vec::new();
    let mut shape = None;
    for f in &index.files {
        let img = load_pnm(&dir.join(f))?;
        let s = img.shape().to_vec();
        if *shape.get_or_insert_with(|| s.clone()) != s {
            return Err(Error::Format(format!("{f}: extent {s:?} differs from the first image")));
        }
        data.extend_from_slice(img.data());
    }
    let s = shape.unwrap_or_else(|| vec![1, index.config.channels, index.config.size, index.config.size]);
    let images = Tensor::new(&[index.files.len(), s[1], s[2], s[3]], data)?;
    let config = SyntheticConfig { images: index.files.len(), channels: s[1], size: s[2], ..index.config };
    Ok(SyntheticDataset { config, images, labels: index.labels })
}

/// Rows `idx` of an `[n, ...]` batch, in order.
pub fn select_images(images: &Tensor, idx: &[usize]) -> Tensor {
    let s = images.shape();
    let per: usize = s[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        out.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, out).expect("consistent extents")
}

/// Crop offsets: center, the eight compass neighbours at distance `margin`,
/// then seeded random offsets in `[-margin, margin]^2`.
pub fn crop_offsets(crops: usize, margin: usize, rng: &mut Rng) -> Vec<(i64, i64)> {
    let m = margin as i64;
    let ring = [(0, 0), (-m, 0), (-m, m), (0, m), (m, m), (m, 0), (m, -m), (0, -m), (-m, -m)];
    let mut out: Vec<(i64, i64)> = ring.iter().copied().take(crops).collect();
    while out.len() < crops {
        let dy = rng.below(2 * margin + 1) as i64 - m;
        let dx = rng.below(2 * margin + 1) as i64 - m;
        out.push((dy, dx));
    }
    out
}

/// Shifted copy of one `[c, s, s]` image; samples outside the frame take
/// the nearest edge value.
fn shifted(image: &[f64], c: usize, s: usize, (dy, dx): (i64, i64)) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.len());
    let clamp = |v: i64| v.clamp(0, s as i64 - 1) as usize;
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                out.push(image[ch * s * s + clamp(y as i64 + dy) * s + clamp(x as i64 + dx)]);
            }
        }
    }
    out
}

/// Encodes every image under `crops` shifted views into a token dataset.
/// The shift margin is half the tokenizer's downsample ratio.
pub fn precompute_codes(ds: &SyntheticDataset, tokenizer: &Tokenizer, crops: usize, seed: u64) -> Result<TokenDataset> {
    ensure!(crops >= 1, Config, "crops_per_image must be >= 1");
    let (n, c, s) = (ds.len(), ds.config.channels, ds.config.size);
    let offsets = crop_offsets(crops, (tokenizer.config.downsample / 2).max(1), &mut Rng::new(seed));
    let per = c * s * s;
    let mut grids = Vec::with_capacity(n * crops);
    const CHUNK: usize = 32;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let mut data = Vec::with_capacity((end - start) * crops * per);
        for i in start..end {
            let img = &ds.images.data()[i * per..(i + 1) * per];
            for &o in &offsets {
                data.extend(shifted(img, c, s, o));
            }
        }
        let batch = Tensor::new(&[(end - start) * crops, c, s, s], data)?;
        grids.extend(tokenizer.tokenize(&batch)?);
    }
    TokenDataset::new(tokenizer.config.codebook_size as u32, crops, grids, ds.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SyntheticConfig { images: 20, ..Default::default() };
        let a = make_synthetic(&cfg).unwrap();
        let b = make_synthetic(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let other = make_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn class_means_differ() {
        let ds = make_synthetic(&SyntheticConfig { images: 200, ..Default::default() }).unwrap();
        let per = 32 * 32;
        let mean_of = |class: u32| {
            let (mut s, mut k) = (0.0, 0);
            for (i, &l) in ds.labels.iter().enumerate() {
                if l == class {
                    s += ds.images.data()[i * per..(i + 1) * per].iter().sum::<f64>();
                    k += per;
                }
            }
            s / k as f64
        };
        assert!((mean_of(0) - mean_of(1)).abs() > 0.05);
    }

    #[test]
    fn crop_sets() {
        let mut rng = Rng::new(0);
        assert_eq!(crop_offsets(1, 2, &mut rng), vec![(0, 0)]);
        let ten = crop_offsets(10, 2, &mut rng);
        assert_eq!(ten.len(), 10);
        assert_eq!(ten[..9].iter().collect::<std::collections::HashSet<_>>().len(), 9);
        assert!(ten.iter().all(|&(y, x)| y.abs() <= 2 && x.abs() <= 2));
        let img: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(shifted(&img, 1, 3, (0, 0)), img);
        assert_eq!(shifted(&img, 1, 3, (1, 0)), vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn directory_round_trip() {
        let ds = make_synthetic(&SyntheticConfig { images: 3, size: 8, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert!(back.images.max_abs_diff(&ds.images) <= 1.0 / 255.0 + 1e-12);
        save_dataset(&back, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().images, back.images);
    }

    #[test]
    fn split_sizes() {
        let ds = make_synthetic(&SyntheticConfig { images: 10, ..Default::default() }).unwrap();
        let (tr, te) = ds.split(3);
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(te.images.shape(), &[3, 1, 32, 32]);
        assert_eq!(te.labels, ds.labels[7..].to_vec());
    }
}

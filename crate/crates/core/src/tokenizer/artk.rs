//! `ARTK` token datasets.
//!
//! Little-endian: magic `ARTK`, u32 version, u32 K, u16 h, u16 w, u32 image
//! count, u16 crops per image, then `count * crops * h * w` u32 indices in
//! raster order, grouped by image then crop. Class labels, when present, live
//! in a JSON sidecar `<file>.json` as `{"labels": [...]}`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::TokenGrid;
use super::model::sidecar;
use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 4] = b"ARTK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 4 + 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenDataset {
    pub codebook_size: u32,
    pub h: usize,
    pub w: usize,
    pub crops: usize,
    /// `images * crops` grids, image-major.
    pub grids: Vec<TokenGrid>,
    /// One class label per image; empty when unlabeled.
    pub labels: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    labels: Vec<u32>,
}

impl TokenDataset {
    pub fn new(codebook_size: u32, crops: usize, grids: Vec<TokenGrid>, labels: Vec<u32>) -> Result<Self> {
        ensure!(crops > 0, Config, "crops per image must be positive");
        let first = grids.first().ok_or_else(|| Error::Dimension("token dataset needs at least one grid".into()))?;
        let (h, w) = (first.h, first.w);
        ensure!(grids.len() % crops == 0, Dimension, "{} grids is not a multiple of {} crops", grids.len(), crops);
        ensure!(
            grids.iter().all(|g| g.h == h && g.w == w),
            Dimension,
            "token grids of mixed extent"
        );
        ensure!(h <= u16::MAX as usize && w <= u16::MAX as usize && crops <= u16::MAX as usize, Dimension, "extent too large");
        if let Some(m) = grids.iter().filter_map(TokenGrid::max_index).max() {
            ensure!(m < codebook_size, Index, "index {} out of range for K = {}", m, codebook_size);
        }
        let images = grids.len() / crops;
        ensure!(
            labels.is_empty() || labels.len() == images,
            Dimension,
            "{} labels for {} images",
            labels.len(),
            images
        );
        Ok(Self { codebook_size, h, w, crops, grids, labels })
    }

    pub fn images(&self) -> usize {
        self.grids.len() / self.crops
    }

    pub fn grid(&self, image: usize, crop: usize) -> &TokenGrid {
        &self.grids[image * self.crops + crop]
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.grids.len() * self.h * self.w);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.codebook_size.to_le_bytes());
        buf.extend_from_slice(&(self.h as u16).to_le_bytes());
        buf.extend_from_slice(&(self.w as u16).to_le_bytes());
        buf.extend_from_slice(&(self.images() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.crops as u16).to_le_bytes());
        for g in &self.grids {
            for &i in &g.indices {
                buf.extend_from_slice(&i.to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(|e| Error::Format(format!("writing token file: {e}")))
    }

    /// Reads the binary part; labels come back empty.
    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut b = Vec::new();
        input
            .read_to_end(&mut b)
            .map_err(|e| Error::Format(format!("reading token file: {e}")))?;
        ensure!(b.len() >= HEADER_LEN && &b[..4] == MAGIC, Format, "not an ARTK token file");
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap()) as usize;
        let version = u32_at(4);
        ensure!(version == VERSION, Format, "unsupported ARTK version {}", version);
        let k = u32_at(8);
        let (h, w) = (u16_at(12), u16_at(14));
        let images = u32_at(16) as usize;
        let crops = u16_at(20);
        let n = images * crops * h * w;
        ensure!(b.len() == HEADER_LEN + 4 * n, Format, "token file body has {} bytes, want {}", b.len() - HEADER_LEN, 4 * n);
        let idx: Vec<u32> = (0..n).map(|i| u32_at(HEADER_LEN + 4 * i)).collect();
        let grids = idx
            .chunks(h * w)
            .map(|c| TokenGrid::new(h, w, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(k, crops, grids, Vec::new()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))?;
        let side = sidecar(path);
        if self.labels.is_empty() {
            if side.exists() {
                std::fs::remove_file(&side).map_err(|e| Error::io(&side, e))?;
            }
            return Ok(());
        }
        let json = serde_json::to_string(&Sidecar { labels: self.labels.clone() })?;
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::read(std::io::BufReader::new(f))?;
        let side = sidecar(path);
        if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let s: Sidecar = serde_json::from_str(&text)?;
            ensure!(s.labels.len() == ds.images(), Format, "{} labels for {} images", s.labels.len(), ds.images());
            ds.labels = s.labels;
        }
        Ok(ds)
    }
}

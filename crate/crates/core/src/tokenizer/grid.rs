use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// An `h x w` grid of code indices, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        ensure!(
            indices.len() == h * w,
            Dimension,
            "grid {}x{} needs {} indices, got {}",
            h,
            w,
            h * w,
            indices.len()
        );
        Ok(Self { h, w, indices })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.indices[row * self.w + col]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Raster-scan (row-major) sequence of the grid.
    pub fn raster_scan(&self) -> Vec<u32> {
        self.indices.clone()
    }

    /// Inverse of [`TokenGrid::raster_scan`].
    pub fn unraster(seq: &[u32], h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, seq.to_vec())
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }
}

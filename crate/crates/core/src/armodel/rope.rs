use crate::error::{ensure, Result};

/// Standard 1D rotary angles `pos * base^(-2i/dim)` for `dim/2` pairs.
pub fn rope1d_angles(pos: usize, dim: usize, base: f64) -> Vec<f64> {
    (0..dim / 2)
        .map(|i| pos as f64 * base.powf(-2.0 * i as f64 / dim as f64))
        .collect()
}

/// 2D rotary angle table, `[h*w, head_dim/2]` in raster order.
///
/// Within each head the first `head_dim/4` rotation pairs carry the row
/// coordinate and the remaining pairs the column coordinate, each a 1D
/// schedule over `head_dim/2` dimensions.
pub fn rope2d_angles(h: usize, w: usize, head_dim: usize, base: f64) -> Result<Vec<f64>> {
    ensure!(
        head_dim % 4 == 0 && head_dim > 0,
        Config,
        "head_dim {} must be a positive multiple of 4",
        head_dim
    );
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(h * w * half);
    for r in 0..h {
        let row = rope1d_angles(r, half, base);
        for c in 0..w {
            out.extend_from_slice(&row);
            out.extend(rope1d_angles(c, half, base));
        }
    }
    Ok(out)
}

/// Angles for every sequence position of a model with `cond_len` prefix
/// slots: the prefix gets angle 0, image position `m` gets grid cell `m`.
pub fn sequence_angles(cond_len: usize, h: usize, w: usize, head_dim: usize, base: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; cond_len * head_dim / 2];
    out.extend(rope2d_angles(h, w, head_dim, base)?);
    Ok(out)
}

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// PSNR returned for identical images, in dB.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;

/// Peak signal-to-noise ratio in dB for signals with dynamic range `range`
/// (2.0 for images in `[-1, 1]`). Capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Tensor, y: &Tensor, range: f64) -> Result<f64> {
    ensure!(x.shape() == y.shape(), Dimension, "psnr of {:?} vs {:?}", x.shape(), y.shape());
    ensure!(!x.is_empty(), Dimension, "psnr of empty tensors");
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean structural similarity over `[n, c, h, w]` images.
///
/// Uniform 8x8 windows at stride 1, population statistics,
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` with `L = range`. Images smaller than
/// the window use a single window covering the whole plane.
pub fn ssim(x: &Tensor, y: &Tensor, range: f64) -> Result<f64> {
    ensure!(x.shape() == y.shape(), Dimension, "ssim of {:?} vs {:?}", x.shape(), y.shape());
    ensure!(x.rank() == 4 && !x.is_empty(), Dimension, "ssim expects non-empty NCHW, got {:?}", x.shape());
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in x.data().chunks(plane).zip(y.data().chunks(plane)) {
        let (s, n) = ssim_plane(a, b, h, w, range);
        total += s;
        count += n;
    }
    Ok(total / count as f64)
}

/// Summed-area table with a zero border, `(h+1) x (w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut acc = 0.0;
        for c in 0..w {
            acc += f(r * w + c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + acc;
        }
    }
    s
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, usize) {
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let tables = [
        integral(h, w, |i| a[i]),
        integral(h, w, |i| b[i]),
        integral(h, w, |i| a[i] * a[i]),
        integral(h, w, |i| b[i] * b[i]),
        integral(h, w, |i| a[i] * b[i]),
    ];
    let n = (wh * ww) as f64;
    let stride = w + 1;
    let mut sum = 0.0;
    let mut windows = 0;
    for r in 0..=h - wh {
        for c in 0..=w - ww {
            let mut m = [0.0; 5];
            for (t, out) in tables.iter().zip(m.iter_mut()) {
                let box_sum = t[(r + wh) * stride + c + ww] - t[r * stride + c + ww] - t[(r + wh) * stride + c]
                    + t[r * stride + c];
                *out = box_sum / n;
            }
            let (mx, my) = (m[0], m[1]);
            let vx = m[2] - mx * mx;
            let vy = m[3] - my * my;
            let cov = m[4] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    (sum, windows)
}

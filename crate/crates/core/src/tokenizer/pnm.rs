//! Binary portable graymaps (`P5`) and pixmaps (`P6`), 8-bit.
//!
//! Pixels map linearly between `[-1, 1]` and `[0, 255]`; out-of-range values
//! are clamped on write.

use std::io::{BufRead, BufReader, Read, Write};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// `[-1, 1] -> 0..=255`, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Encodes a `[c, h, w]` or `[1, c, h, w]` image with `c` of 1 or 3.
pub fn write_pnm<W: Write>(out: W, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::Dimension(format!("expected one CHW image, got {s:?}"))),
    };
    ensure!(c == 1 || c == 3, Dimension, "pixmaps hold 1 or 3 channels, got {}", c);
    let (subtype, color) = if c == 1 {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    let d = image.data();
    let mut buf = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            buf.push(to_byte(d[ch * h * w + p]));
        }
    }
    PnmEncoder::new(out)
        .with_subtype(subtype)
        .write_image(&buf, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("writing pixmap: {e}")))
}

/// Decodes a binary 8-bit `P5`/`P6` stream to a `[1, c, h, w]` tensor.
pub fn read_pnm<R: Read>(input: R) -> Result<Tensor> {
    let mut input = BufReader::new(input);
    let magic = input.fill_buf().map_err(|e| Error::Format(format!("reading pixmap: {e}")))?;
    ensure!(
        magic.starts_with(b"P5") || magic.starts_with(b"P6"),
        Format,
        "not a binary P5/P6 pixmap"
    );
    let dec = PnmDecoder::new(input).map_err(|e| Error::Format(format!("pixmap header: {e}")))?;
    let c = match dec.color_type() {
        ColorType::L8 => 1,
        ColorType::Rgb8 => 3,
        other => return Err(Error::Format(format!("only 8-bit pixmaps are supported, got {other:?}"))),
    };
    let (w, h) = dec.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut body = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut body)
        .map_err(|e| Error::Format(format!("pixmap body: {e}")))?;
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = from_byte(body[p * c + ch]);
        }
    }
    Tensor::new(&[1, c, h, w], data)
}

pub fn save_pnm(path: &Path, image: &Tensor) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pnm(std::io::BufWriter::new(f), image)
}

pub fn load_pnm(path: &Path) -> Result<Tensor> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pnm(std::io::BufReader::new(f))
}

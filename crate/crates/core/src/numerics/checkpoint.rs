//! `RGCK` tensor checkpoints.
//!
//! Layout, all little-endian: magic `RGCK`, u32 version, u32 entry count, then
//! per entry: u16 name length, UTF-8 name bytes, u8 dtype code (0 = f32,
//! 1 = f64), u8 rank, `rank` u32 extents, then the raw values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated or unreadable checkpoint: {e}"))
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(&str, &Tensor)], dtype: DType) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(dtype as u8);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        buf.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent too large: {name}")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t.data().iter().for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    w.write_all(&buf).map_err(fmt_err)
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(fmt_err)?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &take::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(fmt_err)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_code(take::<1>(&mut r)?[0])?;
        let rank = take::<1>(&mut r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(take(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F64 => (0..n).map(|_| Ok(f64::from_le_bytes(take(&mut r)?))).collect::<Result<Vec<_>>>()?,
            DType::F32 => (0..n)
                .map(|_| Ok(f32::from_le_bytes(take(&mut r)?) as f64))
                .collect::<Result<Vec<_>>>()?,
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, entries, DType::F64)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

//! `ZTWCKPT1` tensor checkpoints.
//!
//! Layout: the 8 magic bytes, a little-endian u32 tensor count, then per
//! tensor a u32 name length, the UTF-8 name, a u32 rank, u32 extents and
//! the f64 little-endian values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ZTWCKPT1";

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.into(),
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Decodes a checkpoint; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format {
                path: path.into(),
                offset: at + 4,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")?);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            path: path.into(),
            offset: at,
            msg: format!("tensor {name}: {e}"),
        })?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            offset: c.pos as u64,
            msg: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

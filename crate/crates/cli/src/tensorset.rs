//! Tensor set files: a flat binary list of CHW `f32` tensors.
//!
//! Layout (little-endian): magic `SNNT`, `u32` version, `u32` count, then per
//! tensor `u32` channels, height, width followed by the values.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use spikeconv::{Shape, Tensor};

use crate::Invalid;

const MAGIC: &[u8; 4] = b"SNNT";
const VERSION: u32 = 1;

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let s = t.shape();
        for d in [s.channels, s.height, s.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!(Invalid(format!("tensor set truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        bail!(Invalid("not a tensor set (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        bail!(Invalid(format!("unsupported tensor set version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for i in 0..count {
        let shape = Shape::new(c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
        let raw = c.take(shape.len() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(Tensor::new(shape, data).with_context(|| format!("tensor {i}"))?);
    }
    if c.pos != bytes.len() {
        bail!(Invalid(format!(
            "{} trailing bytes after tensor set",
            bytes.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode(tensors)).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let a = Tensor::from_fn(Shape::new(2, 3, 4), |c, y, x| (c * 12 + y * 4 + x) as f32 * 0.1);
        let b = Tensor::full(Shape::new(1, 1, 1), -0.5f32);
        let bytes = encode(&[a.clone(), b.clone()]);
        assert_eq!(&bytes[..4], b"SNNT");
        assert_eq!(decode(&bytes).unwrap(), vec![a, b]);
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&[Tensor::zeros(Shape::new(1, 2, 2))]);
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.downcast_ref::<Invalid>().is_some());
        assert!(decode(b"XXXX").is_err());
    }
}

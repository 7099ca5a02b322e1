//! Named-array container (all integers little-endian):
//!
//! ```text
//! magic "RTFMCKPT" | u8 version (1) | u32 array count
//! per array: u32 name length | name (UTF-8) | u32 rank | rank × u32 extents | f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RTFMCKPT";
const CHECKPOINT_VERSION: u8 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Dimension(format!("{what} {n} exceeds u32")))
}

pub fn encode_checkpoint<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&u32_of(arrays.len(), "array count")?.to_le_bytes());
    for (name, t) in arrays {
        t.ensure_finite(name)?;
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&u32_of(e, "extent")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.bytes.len() as u64, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RTFMCKPT\""));
    }
    let version = c.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let count = c.u32("array count")?;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_at = c.pos;
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(name_at as u64 + 4, "name is not UTF-8"))?
            .to_string();
        let rank_at = c.pos;
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(rank_at as u64, "extents overflow"))?;
        let values_at = c.pos;
        let raw = c.take(numel.saturating_mul(8), "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((values_at + 8 * i) as u64, format!("non-finite value in {name}")));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(rank_at as u64, e.to_string()))?;
        arrays.push((name, tensor));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last array"));
    }
    Ok(arrays)
}

pub fn write_checkpoint<'a>(
    path: impl AsRef<Path>,
    arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(arrays)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Feature file layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "RTFM"
//! 4       1         version (1)
//! 5       4         T (u32)
//! 9       4         D (u32)
//! 13      4·T·D     f32 values, row-major
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"RTFM";
pub const FEATURE_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let (t, d) = features.dims2()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    out.extend_from_slice(&dim_u32(t)?.to_le_bytes());
    out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    for (i, &v) in features.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("feature value {i} = {v} is not a finite f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Dimension(format!("extent {n} exceeds u32")))
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RTFM\""));
    }
    if bytes.len() < 5 {
        return Err(Error::format(4, "truncated version"));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    if t == 0 {
        return Err(Error::format(5, "T is zero"));
    }
    if d == 0 {
        return Err(Error::format(9, "D is zero"));
    }
    Ok((t, d))
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let (t, d) = parse_header(bytes)?;
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(5, "T·D overflows"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {expected} bytes for {t}×{d}"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format((HEADER_LEN + 4 * i) as u64, "non-finite value"));
        }
        data.push(f64::from(v));
    }
    Tensor::matrix(t, d, data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// `(T, D)` from the header alone.
pub fn read_feature_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    file.take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&head)
}

//! Flat binary checkpoints.
//!
//! Layout (little-endian): 8-byte magic `GSTCKPT\0`, `u32` format version,
//! `u32` tensor count, one `u64` element count per tensor, then every tensor's
//! values as `f64` in declaration order.

use std::path::Path;

use super::VaeError;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"GSTCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &[Tensor]) -> Vec<u8> {
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(16 + 8 * params.len() + 8 * total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    }
    for p in params {
        for x in p.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> VaeError {
    VaeError::Checkpoint(msg.into())
}

/// Decodes into tensors shaped like `template`.
pub fn decode(bytes: &[u8], template: &[Tensor]) -> Result<Vec<Tensor>, VaeError> {
    let take = |pos: usize, n: usize| {
        bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad(format!("truncated at offset {pos}")))
    };
    if take(0, 8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(12, 4)?.try_into().expect("4 bytes")) as usize;
    if count != template.len() {
        return Err(bad(format!("{count} tensors, expected {}", template.len())));
    }
    let mut pos = 16;
    for (k, t) in template.iter().enumerate() {
        let n = u64::from_le_bytes(take(pos, 8)?.try_into().expect("8 bytes")) as usize;
        if n != t.len() {
            return Err(bad(format!("tensor {k} has {n} values, expected {}", t.len())));
        }
        pos += 8;
    }
    let mut out = Vec::with_capacity(count);
    for t in template {
        let raw = take(pos, 8 * t.len())?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Tensor::new(t.shape(), data)?);
        pos += 8 * t.len();
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &[Tensor]) -> Result<(), VaeError> {
    std::fs::write(path, encode(params)).map_err(|source| VaeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, template: &[Tensor]) -> Result<Vec<Tensor>, VaeError> {
    let bytes = std::fs::read(path).map_err(|source| VaeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, template)
}

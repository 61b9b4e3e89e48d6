//! Single-tensor binary files: magic `SGT1`, `u32` ndim, `u32` dims, then
//! little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SGT_MAGIC: &[u8; 4] = b"SGT1";
pub const SGT_MAX_NDIM: usize = 4;

pub fn sgt_encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.ndim() > SGT_MAX_NDIM {
        return Err(Error::invalid_shape("sgt_write", format!("at most {SGT_MAX_NDIM} dims, got {:?}", t.shape())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(SGT_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes an SGT buffer; errors carry the byte offset of the problem.
pub fn sgt_decode(bytes: &[u8]) -> Result<Tensor<f32>, (u64, String)> {
    let word = |at: usize, what: &str| -> Result<u32, (u64, String)> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| (at as u64, format!("truncated while reading {what}")))
    };
    if bytes.len() < 4 || &bytes[..4] != SGT_MAGIC {
        return Err((0, "bad magic, expected SGT1".into()));
    }
    let ndim = word(4, "ndim")? as usize;
    if ndim > SGT_MAX_NDIM {
        return Err((4, format!("ndim {ndim} exceeds {SGT_MAX_NDIM}")));
    }
    let dims = (0..ndim)
        .map(|i| word(8 + 4 * i, "dims").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let start = 8 + 4 * ndim;
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or((8, "dims overflow".to_string()))?;
    let need = numel.checked_mul(4).and_then(|n| n.checked_add(start));
    match need {
        Some(n) if n <= bytes.len() => {
            if n < bytes.len() {
                return Err((n as u64, format!("{} trailing bytes", bytes.len() - n)));
            }
        }
        _ => return Err((bytes.len() as u64, format!("truncated payload, expected {numel} values"))),
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(dims, data).expect("numel checked"))
}

pub fn sgt_write(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = sgt_encode(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sgt_read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    sgt_decode(&bytes).map_err(|(offset, detail)| Error::Format {
        path: path.to_path_buf(),
        offset,
        detail,
    })
}

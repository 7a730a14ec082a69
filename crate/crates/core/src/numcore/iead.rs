//! The `IEAD` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `b"IEAD"` |
//! | 4 | version, `u32` = 1 |
//! | 1 | dtype, `u8` = 0 (`f32`) |
//! | 1 | ndim, `u8` |
//! | 8·ndim | dims, `u64` each |
//! | 4·numel | payload, row-major `f32` |

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IEAD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let take = |at: usize, n: usize| -> std::result::Result<&[u8], String> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| format!("truncated at byte {at}"))
    };
    if take(0, 4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = take(8, 1)?[0];
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype {dtype}"));
    }
    let ndim = take(9, 1)?[0] as usize;
    let mut at = 10;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(at, 8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| "dim overflows usize".to_string())?);
        at += 8;
    }
    let n: usize = dims.iter().product();
    let payload = take(at, 4 * n)?;
    if bytes.len() != at + 4 * n {
        return Err(format!("{} trailing bytes", bytes.len() - at - 4 * n));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| e.to_string())
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

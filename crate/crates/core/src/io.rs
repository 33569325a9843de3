//! Raw tensor files: magic `SHFT`, then N, C, H, W as little-endian `u32`,
//! then `N*C*H*W` little-endian `f32` values in NCHW order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Element, TensorView};

pub const MAGIC: &[u8; 4] = b"SHFT";
pub const HEADER_LEN: usize = 20;

pub fn encode<T: Element>(t: &TensorView<T>) -> Vec<u8> {
    let d = t.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d.numel());
    out.extend_from_slice(MAGIC);
    for v in [d.n, d.c, d.h, d.w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in t.to_vec() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<TensorView<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedFile(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::MalformedFile("missing SHFT magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let dims = Dims::new(field(0), field(1), field(2), field(3)).map_err(|e| Error::MalformedFile(e.to_string()))?;
    let body = &bytes[HEADER_LEN..];
    let expected = dims
        .numel()
        .checked_mul(4)
        .ok_or_else(|| Error::MalformedFile(format!("{dims} overflows")))?;
    if body.len() != expected {
        return Err(Error::MalformedFile(format!(
            "{dims} needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    TensorView::from_vec(dims, values, 1)
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<TensorView<T>> {
    decode(&fs::read(path)?)
}

pub fn write_tensor<T: Element>(path: &Path, t: &TensorView<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

//! `TZF1` matrix files.
//!
//! Layout: the four bytes `TZF1`, three little-endian `u32` values
//! (`rows`, `cols`, `reserved = 0`), then `rows * cols` little-endian `f32`
//! values in row-major order. Values are widened to `f64` on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const MAGIC: &[u8; 4] = b"TZF1";
pub const HEADER_LEN: usize = 16;

pub fn encode(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::invalid("too many rows for TZF1"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::invalid("too many cols for TZF1"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a TZF1 buffer; `origin` only labels error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            origin,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(origin, format!("bad magic {:?}, expected \"TZF1\"", &bytes[..4])));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (rows, cols, reserved) = (word(0), word(1), word(2));
    if reserved != 0 {
        return Err(Error::format(origin, format!("reserved header field is {reserved}, expected 0")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(origin, format!("shape {rows}x{cols} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "shape {rows}x{cols} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(origin, "non-finite value"));
    }
    Matrix::new(rows, cols, data)
}

pub fn write(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode(m)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rounds every entry to the nearest `f32`, making it exactly storable.
pub fn quantize(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

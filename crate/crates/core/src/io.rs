//! On-disk formats.
//!
//! Matrices use the `XMQM` layout: the 4 magic bytes `XMQM`, a little-endian
//! `u32` version (1), `u64` rows, `u64` cols, then `rows × cols`
//! little-endian `f64` values in row-major order. Labels are a text file
//! with one line of space-separated integers per item. Codes are stored as
//! an `N × M` matrix plus a JSON sidecar `{"M", "K", "num_items"}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ensure_finite, CodeMatrix, DenseMatrix, LabelSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XMQM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_matrix(m: &DenseMatrix) -> Result<Vec<u8>> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Header(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Header("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Header(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Header(format!("shape {rows}×{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Header(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut m = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = values.next().unwrap();
            if !v.is_finite() {
                return Err(Error::NonFinite { index: r * cols + c });
            }
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub fn save_matrix(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelSet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|e| Error::Parse {
                        path: path.to_owned(),
                        message: format!("line {}: {tok:?}: {e}", i + 1),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn save_labels(labels: &[LabelSet], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for set in labels {
        let line: Vec<String> = set.0.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodesSidecar {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub num_items: usize,
}

pub fn sidecar_path(codes_path: &Path) -> PathBuf {
    codes_path.with_extension("json")
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_codes(codes: &CodeMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let m = codes.num_dictionaries();
    let n = codes.num_items();
    let mat = DenseMatrix::from_row_iterator(n, m, codes.as_slice().iter().map(|&c| c as f64));
    save_matrix(&mat, path)?;
    save_json(
        &CodesSidecar {
            m,
            k: codes.dictionary_size(),
            num_items: n,
        },
        sidecar_path(path),
    )
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<CodeMatrix> {
    let path = path.as_ref();
    let sidecar: CodesSidecar = load_json(sidecar_path(path))?;
    let mat = load_matrix(path)?;
    if mat.shape() != (sidecar.num_items, sidecar.m) {
        return Err(Error::Codes(format!(
            "matrix is {}×{} but sidecar declares {} items × M={}",
            mat.nrows(),
            mat.ncols(),
            sidecar.num_items,
            sidecar.m
        )));
    }
    let mut codes = Vec::with_capacity(mat.len());
    for r in 0..mat.nrows() {
        for c in 0..mat.ncols() {
            let v = mat[(r, c)];
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(Error::Codes(format!("entry ({r}, {c}) = {v} is not an index")));
            }
            codes.push(v as u32);
        }
    }
    CodeMatrix::new(sidecar.m, sidecar.k, codes)
}

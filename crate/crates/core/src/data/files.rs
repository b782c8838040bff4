//! Feature matrices on disk: `"HVF1"`, a little-endian u32 header length,
//! a JSON header `{"rows":T,"cols":L}`, then `T·L` little-endian f32 values
//! in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HVF1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    rows: usize,
    cols: usize,
}

/// Write `x[T×L]`. Values are stored as f32.
pub fn write_feature_file(path: &Path, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(Error::shape("write_feature_file", format!("expected T×L, got {:?}", x.shape())));
    }
    let header = serde_json::to_vec(&Header {
        rows: x.rows(),
        cols: x.cols(),
    })?;
    let mut bytes = Vec::with_capacity(8 + header.len() + 4 * x.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for &v in x.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::format(path, detail))
}

fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("bad magic, not a feature file".into());
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(format!("truncated header: need {header_len} bytes, have {}", body.len()));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| format!("bad header: {e}"))?;
    let payload = &body[header_len..];
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or("header dimensions overflow")?;
    if payload.len() < expected {
        return Err(format!(
            "truncated payload: header says {}×{} ({expected} bytes), found {} bytes",
            header.rows,
            header.cols,
            payload.len()
        ));
    }
    if payload.len() > expected {
        return Err(format!(
            "payload of {} bytes does not match header {}×{}",
            payload.len(),
            header.rows,
            header.cols
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![header.rows, header.cols], data).map_err(|e| e.to_string())
}

//! Binary policy checkpoints.
//!
//! Layout: the 8-byte magic `RKPOLICY`, a little-endian `u32` header
//! length, a JSON header (`schema_version`, policy configuration, tensor
//! names and shapes), then every tensor's weights as little-endian `f32`
//! in header order, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policy::{PolicyConfig, PolicyParams};
use crate::error::{Error, Result};
use crate::io::SCHEMA_VERSION;
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"RKPOLICY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u64,
    config: PolicyConfig,
    tensors: Vec<TensorHeader>,
}

pub fn to_bytes(params: &PolicyParams<f32>) -> Result<Vec<u8>> {
    params.check()?;
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config: params.config,
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| TensorHeader {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.num_weights());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams<f32>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let value: serde_json::Value = serde_json::from_slice(body)?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(Error::SchemaVersion {
                found,
                expected: SCHEMA_VERSION,
            })
        }
        None => return Err(bad("header has no schema_version")),
    }
    let header: Header = serde_json::from_value(value)?;
    let mut data = &bytes[12 + len..];
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for t in header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| bad("tensor too large"))?;
        if data.len() < 4 * n {
            return Err(bad(&format!("truncated weights in {}", t.name)));
        }
        let (chunk, rest) = data.split_at(4 * n);
        let values = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Matrix::from_vec(t.rows, t.cols, values).expect("shape"));
        names.push(t.name);
        data = rest;
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after weights"));
    }
    let params = PolicyParams {
        config: header.config,
        names,
        tensors,
    };
    params.check()?;
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &PolicyParams<f32>) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PolicyParams<f32>> {
    let path = path.as_ref();
    from_bytes(&fs::read(path)?).map_err(|e| e.context(path.display().to_string()))
}

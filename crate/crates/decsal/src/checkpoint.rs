//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `DSLCKPT1`, a little-endian `u64` header length,
//! a JSON header (model config plus a manifest of every weight's name, shape
//! and byte offset into the payload), then the weights as little-endian
//! `f64` in manifest order.

use std::fs;
use std::path::Path;

use decsal_core::{Matrix, Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"DSLCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub weights: Vec<WeightEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let params = model.params();
    let mut offset = 0u64;
    let weights = params
        .iter()
        .map(|p| {
            let e = WeightEntry {
                name: p.path(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                offset,
            };
            offset += (p.value.data().len() * 8) as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        weights,
    })
    .map_err(|e| HarnessError::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &params {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Data(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut model = Model::init(header.config.clone())?;
    let expected: Vec<(String, usize, usize)> = model
        .params()
        .iter()
        .map(|p| (p.path(), p.value.rows(), p.value.cols()))
        .collect();
    if expected.len() != header.weights.len() {
        return Err(corrupt(format!("{} weights listed, model has {}", header.weights.len(), expected.len())));
    }
    let mut end = 0usize;
    for ((slot, entry), (name, rows, cols)) in model.params_mut().into_iter().zip(&header.weights).zip(expected) {
        if entry.name != name || entry.rows != rows || entry.cols != cols {
            return Err(corrupt(format!(
                "weight {} {}x{} does not match {} {}x{}",
                entry.name, entry.rows, entry.cols, name, rows, cols
            )));
        }
        let start = entry.offset as usize;
        let stop = start + rows * cols * 8;
        let raw = payload.get(start..stop).ok_or_else(|| corrupt(format!("payload too short for {name}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Matrix::from_vec(rows, cols, data)?;
        end = end.max(stop);
    }
    if end != payload.len() {
        return Err(corrupt(format!("{} trailing payload bytes", payload.len() - end)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    from_bytes(&bytes)
}


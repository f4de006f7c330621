//! Binary parameter checkpoints.
//!
//! Layout: the 8 magic bytes `ESPPCT01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every parameter's values as little-endian `f64`
//! in header order. Offsets in the header are byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ESPPCT01";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub params: Vec<TensorEntry>,
    /// Free-form metadata (the training config snapshot, for instance).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

pub fn encode(store: &ParamStore, meta: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        params.push(TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            offset,
        });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&CheckpointHeader { params, meta })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Option<serde_json::Value>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])?;
    let payload = &bytes[header_end..];
    let mut store = ParamStore::new();
    let mut expected = 0;
    for entry in header.params {
        let [r, c] = entry.shape;
        let n = r * c;
        if entry.offset != expected {
            return Err(Error::Checkpoint(format!(
                "{} starts at byte {} but {expected} was expected",
                entry.name, entry.offset
            )));
        }
        let end = entry.offset + n * 8;
        let raw = payload
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated in {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        store.add(entry.name, Tensor2::from_vec(r, c, data)?)?;
        expected = end;
    }
    if expected != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }
    Ok((store, header.meta))
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(store, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, Option<serde_json::Value>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

//! Parameter snapshots: a flat little-endian f32 `.bin` file plus a JSON
//! sidecar (`.json`) listing each tensor's name, shape and element offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

fn sidecar(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `params` to `bin` and its sidecar next to it.
pub fn write_snapshot(bin: &Path, params: &Params) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.numel() * 4);
    let mut index = Vec::new();
    let mut offset = 0;
    for (name, t) in params.entries() {
        index.push(SnapshotEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        bytes.extend_from_slice(&t.to_le_bytes());
        offset += t.len();
    }
    fs::write(bin, bytes)?;
    fs::write(sidecar(bin), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads a snapshot into the layout of `template`. Names and shapes must match.
pub fn read_snapshot(bin: &Path, template: &Params) -> Result<Params> {
    let bytes = fs::read(bin)?;
    let index: Vec<SnapshotEntry> = serde_json::from_slice(&fs::read(sidecar(bin))?)?;
    let names: Vec<String> = template.entries().into_iter().map(|(n, _)| n).collect();
    if index.len() != names.len() {
        return Err(Error::contract(format!(
            "snapshot {} has {} tensors, model has {}",
            bin.display(),
            index.len(),
            names.len()
        )));
    }
    let mut out = template.clone();
    for ((entry, name), t) in index.iter().zip(&names).zip(out.tensors_mut()) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(Error::contract(format!(
                "snapshot tensor {} {:?} does not match model tensor {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let start = entry.offset * 4;
        let end = start + t.len() * 4;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::contract(format!("snapshot {} is truncated", bin.display())))?;
        for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(out)
}

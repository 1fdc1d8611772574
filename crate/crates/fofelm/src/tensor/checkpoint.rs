//! Parameter container format.
//!
//! Layout: 8-byte magic, little-endian u64 header length, a JSON header
//! holding an arbitrary `meta` document plus the manifest (group name →
//! tensor shapes, dtype, byte offset), then the payload of row-major
//! little-endian float64 tensors. Round-trips are bit-exact.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"FOFELMC1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerGroup {
    pub name: String,
    pub tensors: Vec<ContainerEntry>,
}

/// Parsed container content: (group name, tensors) in file order.
pub type ParsedGroups = Vec<(String, Vec<Tensor>)>;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    groups: Vec<ContainerGroup>,
}

/// Serialize groups of tensors plus a metadata document.
pub fn container_bytes(
    meta: &serde_json::Value,
    groups: &[(String, Vec<&Tensor>)],
) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(groups.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensors) in groups {
        let mut entries = Vec::with_capacity(tensors.len());
        for t in tensors {
            entries.push(ContainerEntry {
                rows: t.rows(),
                cols: t.cols(),
                dtype: "f64".to_string(),
                offset: payload.len() as u64,
            });
            payload.extend_from_slice(&t.le_bytes());
        }
        manifest.push(ContainerGroup {
            name: name.clone(),
            tensors: entries,
        });
    }
    let header = Header {
        meta: meta.clone(),
        groups: manifest,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_container(
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
    groups: &[(String, Vec<&Tensor>)],
) -> Result<()> {
    let bytes = container_bytes(meta, groups)?;
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn parse_container(bytes: &[u8]) -> Result<(serde_json::Value, ParsedGroups)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a parameter container".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format("truncated container header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("container header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut groups = Vec::with_capacity(header.groups.len());
    for g in header.groups {
        let mut tensors = Vec::with_capacity(g.tensors.len());
        for e in g.tensors {
            if e.dtype != "f64" {
                return Err(Error::Format(format!("unsupported dtype {}", e.dtype)));
            }
            let start = e.offset as usize;
            let end = start + e.rows * e.cols * 8;
            if payload.len() < end {
                return Err(Error::Format("truncated container payload".into()));
            }
            tensors.push(Tensor::from_le_bytes(e.rows, e.cols, &payload[start..end])?);
        }
        groups.push((g.name, tensors));
    }
    Ok((header.meta, groups))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(serde_json::Value, ParsedGroups)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| {
        Error::Data(format!(
            "cannot read checkpoint {}: {e}",
            path.as_ref().display()
        ))
    })?;
    parse_container(&bytes)
}

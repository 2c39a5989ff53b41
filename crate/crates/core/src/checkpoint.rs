//! Versioned checkpoints: graph topology plus named f64 parameter tensors.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a
//! little-endian u64 manifest length, the JSON manifest (graph topology and
//! the parameter name/shape table, name-sorted), then each tensor's data as
//! little-endian f64 in manifest order. Writing the same graph and
//! parameters twice produces byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ComputeGraph, ParamStore};
use crate::tensor::Tensor;

const MAGIC: [u8; 8] = *b"FPRNCKP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter {0} has no matching target")]
    UnmatchedName(String),
    #[error("parameter {name}: checkpoint shape {ckpt:?} vs target {target:?}")]
    ShapeMismatch {
        name: String,
        ckpt: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    graph: ComputeGraph,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub graph: ComputeGraph,
    pub params: ParamStore,
}

/// Serializes a graph and its parameter store to bytes.
pub fn encode(graph: &ComputeGraph, params: &ParamStore) -> Result<Vec<u8>, CheckpointError> {
    params
        .validate_for(graph)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let entries: Vec<ParamEntry> = params
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        version: FORMAT_VERSION,
        graph: graph.clone(),
        params: entries,
    })?;

    let data_len: usize = params.iter().map(|(_, t)| t.len() * 8).sum();
    let mut bytes = Vec::with_capacity(MAGIC.len() + 12 + manifest.len() + data_len);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for (_, t) in params.iter() {
        let mut buf = vec![0u8; t.len() * 8];
        LittleEndian::write_f64_into(t.data(), &mut buf);
        bytes.extend_from_slice(&buf);
    }
    Ok(bytes)
}

pub fn save(path: &Path, graph: &ComputeGraph, params: &ParamStore) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(graph, params)?)?;
    Ok(())
}

/// Parses checkpoint bytes back into a graph and parameter store.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let header_len = MAGIC.len() + 4 + 8;
    if bytes.len() < header_len || bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = header_len
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("manifest length out of range".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[header_len..manifest_end])?;

    let mut params = ParamStore::new();
    let mut offset = manifest_end;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let end = offset
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} truncated", entry.name)))?;
        let mut data = vec![0.0f64; n];
        LittleEndian::read_f64_into(&bytes[offset..end], &mut data);
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.insert(entry.name.clone(), tensor);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - offset
        )));
    }
    let ckpt = Checkpoint {
        graph: manifest.graph,
        params,
    };
    ckpt.params
        .validate_for(&ckpt.graph)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(ckpt)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}

/// Keeps only the parameters under `prefix` (used to export an encoder
/// without its projection head).
pub fn filter_prefix(params: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        if name.starts_with(prefix) {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

/// Copies every `src` parameter under `prefix` into `dst` by name. Every
/// such parameter must already exist in `dst` with the same shape; returns
/// how many were copied.
pub fn load_by_prefix(
    dst: &mut ParamStore,
    src: &ParamStore,
    prefix: &str,
) -> Result<usize, CheckpointError> {
    let mut staged: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in src.iter() {
        if !name.starts_with(prefix) {
            continue;
        }
        if !dst.contains(name) {
            return Err(CheckpointError::UnmatchedName(name.clone()));
        }
        let target_shape = dst.get(name).expect("checked").shape().to_vec();
        if target_shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                ckpt: t.shape().to_vec(),
                target: target_shape,
            });
        }
        staged.insert(name.clone(), t.clone());
    }
    let count = staged.len();
    for (name, t) in staged {
        dst.insert(name, t);
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Sig};

    fn sample() -> (ComputeGraph, ParamStore) {
        let mut b = GraphBuilder::new();
        let x = b.input("image", Sig::Map { c: 1, h: 4, w: 4 }).unwrap();
        let c = b.conv2d(x, "encoder.l0.conv1", 2, 3, 1, 1).unwrap();
        let r = b.relu(c);
        let gp = b.global_avg_pool(r).unwrap();
        let m = b.matmul(gp, "projection", 3).unwrap();
        let g = b.build(m).unwrap();
        let mut params = ParamStore::new();
        for (name, shape) in g.param_shapes().clone() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| (i as f64 * 0.37 - 1.0) * 1e-3 + 1e-300)
                .collect();
            params.insert(name, Tensor::new(shape, data).unwrap());
        }
        (g, params)
    }

    #[test]
    fn round_trips_bitwise() {
        let (g, params) = sample();
        let bytes = encode(&g, &params).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.graph, g);
        for (name, t) in params.iter() {
            let rt = back.params.get(name).unwrap();
            assert_eq!(rt.shape(), t.shape());
            for (a, b) in rt.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Deterministic encoding.
        assert_eq!(encode(&g, &params).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let (g, params) = sample();
        save(&path, &g, &params).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.graph, g);
        assert_eq!(back.params, params);
    }

    #[test]
    fn rejects_malformed_files() {
        let (g, params) = sample();
        let bytes = encode(&g, &params).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(
            decode(&bad),
            Err(CheckpointError::UnsupportedVersion(99))
        ));

        let bad = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(bad), Err(CheckpointError::Corrupt(_))));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn prefix_filter_and_load() {
        let (_, params) = sample();
        let encoder_only = filter_prefix(&params, "encoder.");
        assert_eq!(encoder_only.len(), 2); // conv1 weight + bias
        assert!(!encoder_only.contains("projection.weight"));

        let (_, mut target) = sample();
        target
            .get_mut("encoder.l0.conv1.weight")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let n = load_by_prefix(&mut target, &encoder_only, "encoder.").unwrap();
        assert_eq!(n, 2);
        assert_eq!(target, params);

        // A prefixed parameter with no home in the target is an error.
        let mut missing = ParamStore::new();
        missing.insert("encoder.l9.conv1.weight", Tensor::zeros(vec![1]));
        assert!(matches!(
            load_by_prefix(&mut target, &missing, "encoder."),
            Err(CheckpointError::UnmatchedName(_))
        ));

        // Shape disagreement is an error, not a silent overwrite.
        let mut wrong = ParamStore::new();
        wrong.insert("encoder.l0.conv1.bias", Tensor::zeros(vec![3]));
        assert!(matches!(
            load_by_prefix(&mut target, &wrong, "encoder."),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}

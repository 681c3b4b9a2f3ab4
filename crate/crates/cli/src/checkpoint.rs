//! Checkpoint directory: `manifest.json` describing the tensors, plus a
//! `weights.bin` blob of little-endian f32 in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nestnet_core::model::{NestNet, NestNetConfig};
use nestnet_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{MANIFEST_FILE}: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("{WEIGHTS_FILE} checksum mismatch: manifest says {expected}, file hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("tensor `{name}`: {message}")]
    Layout { name: String, message: String },
    #[error("{WEIGHTS_FILE} has {actual} bytes; the manifest covers {expected}")]
    BlobSize { expected: u64, actual: u64 },
    #[error(transparent)]
    Model(#[from] nestnet_core::model::ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the weights blob.
    pub weights_sha256: String,
    /// Mean training pixel, the default occlusion fill.
    pub mean_pixel: f32,
    pub training: Option<TrainingRecord>,
}

pub struct Checkpoint {
    pub model: NestNet<f32>,
    pub mean_pixel: f32,
    pub training: Option<TrainingRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest and blob for `checkpoint`, without touching the filesystem.
pub fn encode(checkpoint: &Checkpoint) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(checkpoint.model.parameter_count() * 4);
    let mut tensors = Vec::new();
    for (name, t) in checkpoint.model.parameters() {
        let offset = blob.len() as u64;
        for v in t.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, length: blob.len() as u64 - offset });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: checkpoint.model.config().to_pairs().into_iter().collect(),
        tensors,
        weights_sha256: hex_digest(&blob),
        mean_pixel: checkpoint.mean_pixel,
        training: checkpoint.training.clone(),
    };
    (manifest, blob)
}

pub fn save(checkpoint: &Checkpoint, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, blob) = encode(checkpoint);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(io_err(&path))?;
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, blob).map_err(io_err(&path))
}

/// Rebuild a checkpoint, checking version, checksum and that the entries
/// tile the blob exactly.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: manifest.format_version });
    }
    let actual = hex_digest(blob);
    if actual != manifest.weights_sha256 {
        return Err(CheckpointError::Checksum { expected: manifest.weights_sha256.clone(), actual });
    }
    let config = NestNetConfig::from_pairs(manifest.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut next = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let layout = |message: String| CheckpointError::Layout { name: e.name.clone(), message };
        if e.offset != next {
            return Err(layout(format!("starts at byte {} but the previous tensor ends at {next}", e.offset)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != 4 * count as u64 {
            return Err(layout(format!("{} bytes cannot hold shape {:?}", e.length, e.shape)));
        }
        let end = e.offset + e.length;
        if end > blob.len() as u64 {
            return Err(CheckpointError::BlobSize { expected: end, actual: blob.len() as u64 });
        }
        let values = blob[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| layout(err.to_string()))?;
        tensors.push((e.name.clone(), t));
        next = end;
    }
    if next != blob.len() as u64 {
        return Err(CheckpointError::BlobSize { expected: next, actual: blob.len() as u64 });
    }
    let model = NestNet::from_parameters(config, tensors)?;
    Ok(Checkpoint { model, mean_pixel: manifest.mean_pixel, training: manifest.training.clone() })
}

pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
    let path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&path).map_err(io_err(&path))?;
    decode(&manifest, &blob)
}

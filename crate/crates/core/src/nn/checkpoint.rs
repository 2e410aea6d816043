//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` is the concatenation, in manifest order, of every tensor's
//! values as little-endian IEEE-754 `f32`, with no header or padding. The
//! manifest lists each tensor's name and shape and records the SHA-256 of the
//! blob in lowercase hex.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Module;
use crate::error::{Error, Result};
use crate::wavelet::ScaleGrid;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub architecture: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<Vec<String>>,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    #[serde(default)]
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every optimizer step, in order.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_grid: Option<ScaleGrid>,
    #[serde(default)]
    pub weights_sha256: String,
}

impl Manifest {
    pub fn declared_len(&self) -> usize {
        self.tensors.iter().map(TensorEntry::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub manifest: Manifest,
    pub weights: Vec<f32>,
}

impl ModelCheckpoint {
    pub fn new(architecture: impl Into<String>, seed: u64) -> Self {
        Self {
            manifest: Manifest {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                architecture: architecture.into(),
                tensors: Vec::new(),
                label_map: None,
                hyperparameters: serde_json::Value::Null,
                seed,
                epochs: Vec::new(),
                loss_curve: Vec::new(),
                scale_grid: None,
                weights_sha256: String::new(),
            },
            weights: Vec::new(),
        }
    }

    /// Append every tensor of `module` under `prefix`.
    pub fn push_module<M: Module>(&mut self, prefix: &str, module: &M) {
        module.visit(prefix, &mut |name, _, t| {
            self.manifest.tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
            });
            self.weights.extend(t.data.iter().map(|&v| v as f32));
        });
        self.manifest.weights_sha256 = digest(&self.weights);
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.manifest.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    /// Copy the tensors stored under `prefix` into `module`, checking names and shapes.
    pub fn restore_into<M: Module>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut offsets = std::collections::HashMap::new();
        let mut off = 0;
        for t in &self.manifest.tensors {
            offsets.insert(t.name.as_str(), (off, &t.shape));
            off += t.numel();
        }
        let mut err = None;
        module.visit_mut(prefix, &mut |name, _, t| {
            if err.is_some() {
                return;
            }
            match offsets.get(name) {
                Some(&(o, shape)) if *shape == t.shape => {
                    let n = t.numel();
                    for (d, &s) in t.data.iter_mut().zip(&self.weights[o..o + n]) {
                        *d = f64::from(s);
                    }
                }
                Some(&(_, shape)) => {
                    err = Some(Error::CorruptManifest(format!(
                        "tensor {name} has shape {shape:?}, model expects {:?}",
                        t.shape
                    )))
                }
                None => err = Some(Error::CorruptManifest(format!("tensor {name} missing"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

fn to_bytes(weights: &[f32]) -> Vec<u8> {
    weights.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn digest(weights: &[f32]) -> String {
    hex::encode(Sha256::digest(to_bytes(weights)))
}

pub fn save_checkpoint(c: &ModelCheckpoint, dir: &Path) -> Result<()> {
    if c.weights.len() != c.manifest.declared_len() {
        return Err(Error::SizeMismatch {
            declared: c.manifest.declared_len(),
            found: c.weights.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = to_bytes(&c.weights);
    let mut manifest = c.manifest.clone();
    manifest.weights_sha256 = hex::encode(Sha256::digest(&bytes));
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Load and validate a checkpoint; sizes and digest are checked before any
/// weight is decoded.
pub fn load_checkpoint(dir: &Path) -> Result<ModelCheckpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::CorruptManifest(format!(
            "schema version {} (supported: {CHECKPOINT_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let declared = manifest.declared_len();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != declared {
        return Err(Error::SizeMismatch {
            declared,
            found: bytes.len() / 4,
        });
    }
    let found = hex::encode(Sha256::digest(&bytes));
    if found != manifest.weights_sha256 {
        return Err(Error::CorruptBlob {
            expected: manifest.weights_sha256.clone(),
            found,
        });
    }
    let weights = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(ModelCheckpoint { manifest, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Mlp, Module};

    fn sample() -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new("test", 3);
        let net = init_params("projection-head", 3).unwrap();
        c.push_module("proj", &net);
        c.manifest.loss_curve = vec![1.0, 0.5];
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(&c, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.manifest.tensors, c.manifest.tensors);
        assert_eq!(back.manifest.loss_curve, c.manifest.loss_curve);
        assert!(back.weights.iter().zip(&c.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn restore_round_trips_through_f32() {
        let c = sample();
        let mut m = Mlp::projection();
        c.restore_into("proj", &mut m).unwrap();
        let flat: Vec<f32> = m.flatten().iter().map(|&v| v as f32).collect();
        assert_eq!(flat, c.weights);
        let mut wrong = Mlp::new(96, 10, 96);
        assert!(matches!(c.restore_into("proj", &mut wrong), Err(Error::CorruptManifest(_))));
        assert!(matches!(c.restore_into("other", &mut m), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn truncated_blob_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn edited_shape_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        m.tensors[0].shape = vec![96, 95];
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn flipped_byte_is_corrupt_blob() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptBlob { .. })));
    }

    #[test]
    fn garbage_manifest_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"schema_version\": 1}").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptManifest(_))));
    }
}

//! Checkpoints: a JSON manifest next to a little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ModelConfig, ModelParams, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: String,
    pub blob: String,
    pub blob_sha256: String,
    pub model: ModelConfig,
    /// Free-form settings echoed by the producer (for example the training
    /// configuration).
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.store.count() * 8);
    for t in &params.store.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hex SHA-256 of the parameter blob; identical parameters give identical
/// digests.
pub fn params_digest(params: &ModelParams) -> String {
    sha256_hex(&blob_bytes(params))
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (manifest) and `path` with extension `bin` (blob).
pub fn save(params: &ModelParams, path: &Path, extra: serde_json::Value) -> Result<Manifest> {
    let bytes = blob_bytes(params);
    let blob = blob_path(path);
    let mut offset = 0;
    let tensors = params
        .store
        .names
        .iter()
        .zip(&params.store.tensors)
        .map(|(n, t)| {
            let e = TensorEntry {
                name: n.clone(),
                shape: t.shape(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: "f64".into(),
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Checkpoint("checkpoint path has no file name".into()))?
            .to_string(),
        blob_sha256: sha256_hex(&bytes),
        model: params.config.clone(),
        extra,
        tensors,
    };
    fs::write(&blob, &bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a checkpoint, checking the digest and that every tensor matches
/// the shape the model configuration implies.
pub fn load(path: &Path) -> Result<(ModelParams, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.precision != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported precision {}",
            manifest.precision
        )));
    }
    let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob)?;
    if sha256_hex(&bytes) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("parameter blob digest mismatch".into()));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(
            "parameter blob length is not a multiple of 8".into(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    manifest.model.validate()?;
    let layout = manifest.model.layout();
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model needs {}",
            manifest.tensors.len(),
            layout.len()
        )));
    }
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), e) in layout.into_iter().zip(&manifest.tensors) {
        if name != e.name || shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {} with {:?}",
                e.name, e.shape, name, shape
            )));
        }
        let n = shape[0] * shape[1];
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the blob")))?
            .to_vec();
        names.push(name);
        tensors.push(Tensor::from_vec(shape[0], shape[1], data));
    }
    let params = ModelParams {
        config: manifest.model.clone(),
        store: ParamStore::new(names, tensors),
    };
    Ok((params, manifest))
}

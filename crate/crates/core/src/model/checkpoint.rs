//! Manifest + blob container shared by checkpoints and embedding exports.
//!
//! `<stem>.json` is a JSON manifest listing every tensor's name, shape,
//! dtype and byte range; `<stem>.bin` holds the tensors back to back as
//! little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest<M> {
    pub format: String,
    pub blob: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: M,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` (a `.json` path) and its sibling `.bin` blob.
pub fn write_container<M: Serialize>(
    manifest: &Path,
    format: &str,
    tensors: &[(&str, &Tensor<f32>)],
    meta: M,
) -> Result<()> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: bytes.len() as u64 - offset,
        });
    }
    let m = ContainerManifest {
        format: format.into(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        byte_order: "little".into(),
        tensors: entries,
        meta,
    };
    if let Some(dir) = manifest.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_vec_pretty(&m)?;
    fs::write(manifest, json).map_err(|e| Error::io(manifest, e))?;
    Ok(())
}

pub fn read_container<M: DeserializeOwned>(
    manifest: &Path,
    format: &str,
) -> Result<(ContainerManifest<M>, Vec<Tensor<f32>>)> {
    let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: ContainerManifest<M> = serde_json::from_slice(&text)?;
    if m.format != format {
        return Err(Error::Parse(format!(
            "{}: expected format {format:?}, found {:?}",
            manifest.display(),
            m.format
        )));
    }
    let blob = manifest.with_file_name(&m.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut out = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        if e.dtype != "f32" {
            return Err(Error::Parse(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Parse(format!("tensor {} lies outside the blob", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok((m, out))
}

pub const CHECKPOINT_FORMAT: &str = "tjepa-checkpoint-v1";

/// Training position from which per-sample random streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_hash: String,
    pub schema: FeatureSchema,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    /// Echo of the training configuration that produced this state.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: ModelState<f32>,
}

impl Checkpoint {
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let tensors: Vec<(&str, &Tensor<f32>)> = self.state.store.iter().map(|(_, n, t)| (n, t)).collect();
        write_container(manifest, CHECKPOINT_FORMAT, &tensors, &self.meta)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (m, tensors) = read_container::<CheckpointMeta>(manifest, CHECKPOINT_FORMAT)?;
        let mut state = ModelState::<f32>::new(m.meta.model.clone(), 0)?;
        if m.tensors.len() != state.store.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} tensors, model expects {}",
                m.tensors.len(),
                state.store.len()
            )));
        }
        for (entry, t) in m.tensors.iter().zip(tensors) {
            let id = state
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::Parse(format!("unknown tensor {}", entry.name)))?;
            let slot = state.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "tensor {}: shape {:?}, model expects {:?}",
                    entry.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(Checkpoint { meta: m.meta, state })
    }
}

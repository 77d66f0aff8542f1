//! Tar container with `manifest.json` and one `tensors.bin` blob of
//! little-endian parameter data.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{ensure, Error, Result};
use crate::network::{ModelConfig, SegDiffNet};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::schedule::ScheduleKind;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the tensor blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub schedule: ScheduleKind,
    pub tensors: Vec<TensorRecord>,
    /// SHA-256 of `"blob <len>\0"` followed by the tensor blob.
    pub content_hash: String,
}

fn content_hash(blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", blob.len()).as_bytes());
    h.update(blob);
    hex::encode(h.finalize())
}

fn append<W: Write>(builder: &mut tar::Builder<W>, name: &str, data: &[u8], path: &Path) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, name, data)
        .map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &SegDiffNet<T>,
    step: u64,
    train: Option<&TrainConfig>,
    schedule: ScheduleKind,
) -> Result<CheckpointManifest> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for e in model.params().entries() {
        let bytes = T::to_le_bytes_vec(e.value.data());
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: blob.len(),
            bytes: bytes.len(),
        });
        blob.extend(bytes);
    }
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        step,
        model: model.config().clone(),
        train: train.cloned(),
        schedule,
        tensors,
        content_hash: content_hash(&blob),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut builder = tar::Builder::new(file);
    append(&mut builder, MANIFEST, &json, path)?;
    append(&mut builder, BLOB, &blob, path)?;
    builder
        .into_inner()
        .and_then(|mut f| f.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint, verifies its hash and rebuilds the model.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SegDiffNet<T>, CheckpointManifest)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut archive = tar::Archive::new(file);
    let (mut manifest, mut blob) = (None, None);
    for entry in archive.entries().map_err(|e| Error::io(path, e))? {
        let mut entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.path().map_err(|e| Error::io(path, e))?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
        match name.as_str() {
            MANIFEST => manifest = Some(data),
            BLOB => blob = Some(data),
            _ => {}
        }
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest.ok_or_else(|| corrupt("missing manifest".into()))?)
        .map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    let blob = blob.ok_or_else(|| corrupt("missing tensor blob".into()))?;
    ensure!(
        manifest.format == FORMAT_VERSION,
        "{}: unsupported checkpoint format {}",
        path.display(),
        manifest.format
    );
    if content_hash(&blob) != manifest.content_hash {
        return Err(corrupt("tensor data does not match the recorded hash".into()));
    }
    let mut model = SegDiffNet::<T>::new(manifest.model.clone(), 0)?;
    ensure!(
        manifest.tensors.len() == model.params().len(),
        "{}: checkpoint has {} tensors, model expects {}",
        path.display(),
        manifest.tensors.len(),
        model.params().len()
    );
    for rec in &manifest.tensors {
        ensure!(rec.dtype == T::DTYPE, "{}: tensor {} is {}, expected {}", path.display(), rec.name, rec.dtype, T::DTYPE);
        let id: ParamId = model
            .params()
            .id_of(&rec.name)
            .ok_or_else(|| corrupt(format!("unknown tensor {}", rec.name)))?;
        let end = rec.offset.checked_add(rec.bytes).filter(|&e| e <= blob.len());
        let end = end.ok_or_else(|| corrupt(format!("tensor {} overruns the blob", rec.name)))?;
        let value = Tensor::from_vec(&rec.shape, T::from_le_bytes_slice(&blob[rec.offset..end]))?;
        ensure!(
            value.shape() == model.params().get(id).shape(),
            "{}: tensor {} has shape {:?}, model expects {:?}",
            path.display(),
            rec.name,
            value.shape(),
            model.params().get(id).shape()
        );
        model.params_mut().set(id, value)?;
    }
    Ok((model, manifest))
}

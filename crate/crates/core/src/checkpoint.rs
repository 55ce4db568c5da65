//! Checkpoint directories: a json manifest plus one binary blob per tensor.
//!
//! Blob layout (little endian): magic `CRNT`, `u32` version, `u8` dtype
//! (0 = f32, 1 = f64), `u32` rank, `u64` per dimension, then the row-major data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Mat;
use crate::config::{BlobDtype, ModelConfig, OptimizerKind};
use crate::corpus::TagVocabulary;
use crate::encoder::CharVocab;
use crate::model::Model;
use crate::optim::Optimizer;
use crate::training::MetricRecord;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CRNT";
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("{path}: {message}")]
    Blob { path: PathBuf, message: String },
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<TensorEntry>,
    pub second: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tags: TagVocabulary,
    pub chars: CharVocab,
    pub lookup: bool,
    pub epoch: usize,
    pub history: Vec<MetricRecord>,
    pub optimizer: OptimizerState,
    pub params: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub history: Vec<MetricRecord>,
    pub optimizer: Optimizer,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn encode_blob(m: &Mat, dtype: BlobDtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(25 + m.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.push(match dtype {
        BlobDtype::F32 => 0,
        BlobDtype::F64 => 1,
    });
    out.extend_from_slice(&2u32.to_le_bytes());
    for d in m.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for &x in m.iter() {
        match dtype {
            BlobDtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            BlobDtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Mat, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("truncated tensor blob")?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(format!("unsupported blob version {version}"));
    }
    let width = match take(1)?[0] {
        0 => 4,
        1 => 8,
        d => return Err(format!("unknown dtype code {d}")),
    };
    let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let dims = (0..rank)
        .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize))
        .collect::<Result<Vec<_>, String>>()?;
    let (rows, cols) = match dims[..] {
        [r, c] => (r, c),
        [r] => (1, r),
        _ => return Err(format!("unsupported rank {rank}")),
    };
    let data = take(rows * cols * width)?;
    let values: Vec<f64> = data
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_le_bytes(c.try_into().expect("4")) as f64
            } else {
                f64::from_le_bytes(c.try_into().expect("8"))
            }
        })
        .collect();
    if pos != bytes.len() {
        return Err("trailing bytes after tensor data".into());
    }
    Mat::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

fn write_tensor(
    dir: &Path,
    file: String,
    name: &str,
    m: &Mat,
    dtype: BlobDtype,
) -> Result<TensorEntry, CheckpointError> {
    let path = dir.join(&file);
    fs::write(&path, encode_blob(m, dtype)).map_err(io(&path))?;
    Ok(TensorEntry { name: name.to_string(), file, shape: m.shape().to_vec() })
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Mat, CheckpointError> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(io(&path))?;
    let m = decode_blob(&bytes).map_err(|message| CheckpointError::Blob { path: path.clone(), message })?;
    if m.shape() != entry.shape.as_slice() {
        return Err(CheckpointError::Blob {
            path,
            message: format!("shape {:?} != manifest {:?}", m.shape(), entry.shape),
        });
    }
    Ok(m)
}

pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let model = &ckpt.model;
    let dtype = model.config.checkpoint_dtype;
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(io(&tensors))?;
    let mut params = Vec::new();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for id in model.store.ids() {
        let name = model.store.name(id);
        params.push(write_tensor(dir, format!("tensors/{name}.bin"), name, model.store.get(id), dtype)?);
        if let Some(m) = ckpt.optimizer.first.get(id.0) {
            first.push(write_tensor(dir, format!("tensors/{name}.adam_m.bin"), name, m, dtype)?);
        }
        if let Some(v) = ckpt.optimizer.second.get(id.0) {
            second.push(write_tensor(dir, format!("tensors/{name}.adam_v.bin"), name, v, dtype)?);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tags: model.tags.clone(),
        chars: model.chars.clone(),
        lookup: model.lookup,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        optimizer: OptimizerState { kind: ckpt.optimizer.kind, step: ckpt.optimizer.step, first, second },
        params,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))
}

pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest { path: path.clone(), source })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let types = TagVocabulary::new(manifest.tags.entity_types.clone(), true);
    let mut model = Model::new(manifest.config.clone(), &types, manifest.chars.clone().reindex(), manifest.lookup, 0);
    if model.tags != manifest.tags {
        return Err(CheckpointError::Layout("tag vocabulary does not match the prediction mode".into()));
    }
    if manifest.params.len() != model.store.len() {
        return Err(CheckpointError::Layout(format!(
            "{} tensors stored, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let lookup = |entry: &TensorEntry| {
        model.store.id(&entry.name).ok_or_else(|| CheckpointError::Layout(format!("unknown parameter {}", entry.name)))
    };
    let mut values = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        values.push((lookup(entry)?, read_tensor(dir, entry)?));
    }
    for (id, m) in values {
        if m.dim() != model.store.get(id).dim() {
            return Err(CheckpointError::Layout(format!(
                "parameter {} has shape {:?}",
                model.store.name(id),
                m.shape()
            )));
        }
        *model.store.get_mut(id) = m;
    }
    let mut optimizer = Optimizer::new(&manifest.config.optimizer, &model.store);
    optimizer.kind = manifest.optimizer.kind;
    optimizer.step = manifest.optimizer.step;
    for (target, entries) in
        [(&mut optimizer.first, &manifest.optimizer.first), (&mut optimizer.second, &manifest.optimizer.second)]
    {
        if entries.is_empty() {
            continue;
        }
        *target = model.store.ids().map(|id| Mat::zeros(model.store.get(id).raw_dim())).collect();
        for entry in entries {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| CheckpointError::Layout(format!("unknown optimizer slot {}", entry.name)))?;
            target[id.0] = read_tensor(dir, entry)?;
        }
    }
    Ok(Checkpoint { model, epoch: manifest.epoch, history: manifest.history, optimizer })
}

//! Binary checkpoint: `HMLB`, a little-endian `u32` version, a `u64`
//! length-prefixed UTF-8 JSON metadata document, then the raw
//! little-endian tensor payloads in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamScalars, Schedule};
use super::{History, Progress, TrainConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelState};
use crate::numerics::{DType, ParamKind, ParamSet, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"HMLB";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    dtype: DType,
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocabulary,
    optimizer: AdamScalars,
    schedule: Schedule,
    progress: Progress,
    history: History,
    params: Vec<ParamEntry>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub adam: Adam<T>,
    pub schedule: Schedule,
    pub progress: Progress,
    pub history: History,
    pub state: Option<ModelState<T>>,
}

fn fail(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl<T: Real> Snapshot<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for p in self.model.params.iter() {
            out.push((format!("param.{}", p.name), &p.value));
        }
        for (p, m) in self.model.params.iter().zip(&self.adam.m) {
            out.push((format!("adam.m.{}", p.name), m));
        }
        for (p, v) in self.model.params.iter().zip(&self.adam.v) {
            out.push((format!("adam.v.{}", p.name), v));
        }
        if let Some(s) = &self.state {
            out.extend(s.named_tensors());
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            let start = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset: start as u64,
                crc32: crc32fast::hash(&payload[start..]),
            });
        }
        let meta = Meta {
            dtype: T::DTYPE,
            model: self.model.config.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            optimizer: self.adam.scalars(),
            schedule: self.schedule.clone(),
            progress: self.progress.clone(),
            history: self.history.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                    trainable: p.trainable,
                })
                .collect(),
            tensors,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::with_capacity(HEADER + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let meta = read_meta(bytes, path)?;
        if meta.dtype != T::DTYPE {
            return Err(fail(path, format!("holds {:?} tensors, expected {:?}", meta.dtype, T::DTYPE)));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[HEADER + json_len..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut cursor = 0usize;
        for e in &meta.tensors {
            if e.dtype != T::DTYPE {
                return Err(fail(path, format!("tensor {} has dtype {:?}", e.name, e.dtype)));
            }
            if e.offset as usize != cursor {
                return Err(fail(path, format!("tensor {} at offset {}, expected {cursor}", e.name, e.offset)));
            }
            let len = e.shape.iter().product::<usize>() * T::DTYPE.size();
            let Some(raw) = payload.get(cursor..cursor + len) else {
                return Err(fail(path, format!("truncated in tensor {} ({} of {len} bytes)", e.name, payload.len().saturating_sub(cursor))));
            };
            if crc32fast::hash(raw) != e.crc32 {
                return Err(fail(path, format!("checksum mismatch in tensor {}", e.name)));
            }
            let data: Vec<T> = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            cursor += len;
        }
        if cursor != payload.len() {
            return Err(fail(path, format!("{} trailing bytes after the last tensor", payload.len() - cursor)));
        }
        assemble(meta, tensors, path)
    }
}

fn read_meta(bytes: &[u8], path: &Path) -> Result<Meta> {
    if bytes.len() < HEADER {
        return Err(fail(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(path, format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (HEADER as u64).checked_add(json_len).filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(fail(path, "truncated metadata"));
    };
    serde_json::from_slice(&bytes[HEADER..end as usize]).map_err(|e| fail(path, format!("metadata: {e}")))
}

/// Element type recorded in a checkpoint, without reading the payloads.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_meta(&bytes, path)?.dtype)
}

fn assemble<T: Real>(meta: Meta, tensors: Vec<(String, Tensor<T>)>, path: &Path) -> Result<Snapshot<T>> {
    let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    let mut take = |name: String| by_name.remove(&name).ok_or_else(|| fail(path, format!("missing tensor {name}")));

    let mut params = ParamSet::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for p in &meta.params {
        let id = params.insert(p.name.clone(), p.kind, take(format!("param.{}", p.name))?)?;
        params.get_mut(id).trainable = p.trainable;
    }
    for p in &meta.params {
        m.push(take(format!("adam.m.{}", p.name))?);
    }
    for p in &meta.params {
        v.push(take(format!("adam.v.{}", p.name))?);
    }
    for ((p, m), v) in params.iter().zip(&m).zip(&v) {
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(fail(path, format!("moment shapes of {} do not match the parameter", p.name)));
        }
    }
    let model = Model::from_params(meta.model, params).map_err(|e| fail(path, e.to_string()))?;

    let state = match by_name.get("state.layer1.h").map(|h| h.rows()) {
        None => None,
        Some(batch) => {
            let mut s = ModelState::zeros(&model.config, batch);
            for (name, slot) in s.named_tensors_mut() {
                let t = by_name.remove(&name).ok_or_else(|| fail(path, format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(fail(path, format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
            }
            Some(s)
        }
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(fail(path, format!("unexpected tensor {extra}")));
    }
    Ok(Snapshot {
        model,
        train: meta.train,
        vocab: meta.vocab,
        adam: Adam::from_parts(meta.optimizer, m, v),
        schedule: meta.schedule,
        progress: meta.progress,
        history: meta.history,
        state,
    })
}

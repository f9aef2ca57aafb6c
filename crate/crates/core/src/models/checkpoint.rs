//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `AVGCKPT\0` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | header length `n` (`u64`) |
//! | n | UTF-8 JSON header: spec, seed, parameter names/shapes, batch-norm running statistics, sketch parameters, free-form metadata |
//! | rest | every parameter tensor in header order, then each batch-norm layer's running mean and variance, all as `f64` |
//!
//! Files are written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::fsutil::{put_f64s, read, write_atomic, Reader};
use crate::fusion_ops::SketchParams;
use crate::nn::{BnState, Param, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    binarized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    name: String,
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<TensorEntry>,
    batch_norm: Vec<BnEntry>,
    sketch: Option<SketchParams>,
    metadata: BTreeMap<String, serde_json::Value>,
}

/// A restored model plus whatever metadata was saved with it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn encode_checkpoint(model: &Model, metadata: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let header = Header {
        spec: model.spec().clone(),
        seed: model.seed(),
        tensors: model
            .store()
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                binarized: p.binarized,
            })
            .collect(),
        batch_norm: model
            .store()
            .bn()
            .iter()
            .map(|b| BnEntry {
                name: b.name.clone(),
                channels: b.mean.len(),
            })
            .collect(),
        sketch: model.sketch().cloned(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.param_count() + 1024);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store().params() {
        put_f64s(&mut out, p.value.data());
    }
    for b in model.store().bn() {
        put_f64s(&mut out, &b.mean);
        put_f64s(&mut out, &b.var);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut r = Reader::new(bytes);
    if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let json = r.take(n).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let len = t.shape.iter().product();
        let data = r
            .f64s(len)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated at `{}`", t.name)))?;
        params.push(Param {
            name: t.name,
            value: Tensor::from_vec(&t.shape, data)?,
            binarized: t.binarized,
        });
    }
    let mut bn = Vec::with_capacity(header.batch_norm.len());
    for b in header.batch_norm {
        let trunc = || Error::Checkpoint(format!("payload truncated at batch-norm `{}`", b.name));
        let mean = r.f64s(b.channels).ok_or_else(trunc)?;
        let var = r.f64s(b.channels).ok_or_else(trunc)?;
        bn.push(BnState { name: b.name, mean, var });
    }
    if !r.is_done() {
        return Err(bad("trailing bytes after payload"));
    }
    let store = ParamStore::from_parts(params, bn)?;
    let model = Model::from_parts(header.spec, header.seed, store, header.sketch)?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, metadata)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

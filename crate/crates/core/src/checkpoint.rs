//! Parameter files: an 8-byte little-endian manifest length, a JSON
//! manifest naming every tensor with its shape and byte offset, then the
//! tensors as little-endian `f32` arrays in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{param_shapes, ModelConfig, ModelParams};
use crate::numerics::{Real, Tensor};
use crate::Error;

pub const FORMAT: &str = "supervit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor data.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: Option<String>,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub data_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub config_hash: Option<String>,
    pub params: ModelParams<f32>,
}

fn ckpt_err(name: &str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        name: name.to_string(),
        message: message.into(),
    }
}

/// Serialises parameters (rounded to `f32`) with their model config.
pub fn encode_checkpoint<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    config_hash: Option<&str>,
) -> Result<Vec<u8>, Error> {
    let expected = param_shapes(model);
    let expected = expected.named();
    let named = params.named();
    if named.len() != expected.len() {
        return Err(ckpt_err("*", format!("{} tensors for a model with {}", named.len(), expected.len())));
    }
    let mut tensors = Vec::with_capacity(named.len());
    let mut data = Vec::new();
    for ((name, t), (_, shape)) in named.iter().zip(&expected) {
        if t.shape() != shape.as_slice() {
            return Err(ckpt_err(name, format!("shape {:?}, model expects {shape:?}", t.shape())));
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config_hash: config_hash.map(str::to_string),
        model: model.clone(),
        tensors,
        data_bytes: data.len() as u64,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| ckpt_err("manifest", e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, Error> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| ckpt_err("manifest", "file shorter than the 8-byte header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header = bytes
        .get(8..8usize.saturating_add(header_len))
        .ok_or_else(|| ckpt_err("manifest", format!("header of {header_len} bytes is truncated")))?;
    let manifest: Manifest = serde_json::from_slice(header).map_err(|e| ckpt_err("manifest", e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(ckpt_err(
            "manifest",
            format!("unsupported format {} version {}", manifest.format, manifest.version),
        ));
    }
    manifest.model.validate_architecture()?;
    let data = &bytes[8 + header_len..];
    if data.len() as u64 != manifest.data_bytes {
        return Err(ckpt_err(
            "data",
            format!("{} bytes of tensor data, manifest declares {}", data.len(), manifest.data_bytes),
        ));
    }

    let expected = param_shapes(&manifest.model);
    let expected = expected.named();
    if manifest.tensors.len() != expected.len() {
        return Err(ckpt_err(
            "manifest",
            format!("{} tensors listed, model has {}", manifest.tensors.len(), expected.len()),
        ));
    }
    let mut offset = 0u64;
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(ckpt_err(&entry.name, format!("expected tensor {name} at this position")));
        }
        if &entry.shape != *shape {
            return Err(ckpt_err(name, format!("shape {:?}, model expects {shape:?}", entry.shape)));
        }
        if entry.offset != offset {
            return Err(ckpt_err(name, format!("offset {} should be {offset}", entry.offset)));
        }
        let n = shape.iter().product::<usize>();
        let end = offset as usize + 4 * n;
        let raw = data
            .get(offset as usize..end)
            .ok_or_else(|| ckpt_err(name, "tensor data is truncated"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        loaded.push(Tensor::new(shape.to_vec(), values)?);
        offset = end as u64;
    }
    if offset != manifest.data_bytes {
        return Err(ckpt_err("data", format!("{} trailing bytes", manifest.data_bytes - offset)));
    }
    let mut it = loaded.into_iter();
    let params = param_shapes(&manifest.model).map(|_, _| it.next().expect("counted"));
    Ok(Checkpoint {
        model: manifest.model,
        config_hash: manifest.config_hash,
        params,
    })
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &ModelConfig,
    params: &ModelParams<T>,
    config_hash: Option<&str>,
) -> Result<(), Error> {
    let bytes = encode_checkpoint(model, params, config_hash)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

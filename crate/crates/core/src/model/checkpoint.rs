//! Binary checkpoints.
//!
//! Layout: the magic `T2AR`, a little-endian `u32` version, a little-endian
//! `u64` manifest length, the JSON manifest, then every tensor as raw
//! little-endian `f64` values at the manifest's byte offsets (relative to the
//! end of the manifest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T2AR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    dims: ModelDims,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
}

pub fn encode(model: &ModelParams) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in &model.params {
        tensors.push(Entry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: t.shape(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        dims: model.dims.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.params.values() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_owned());
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing T2AR magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    let manifest: Manifest = serde_json::from_slice(body.get(..mlen).ok_or_else(|| bad("truncated manifest"))?)?;
    let data = &body[mlen..];
    let mut params = ParamMap::new();
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let raw = data
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: data out of bounds", e.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape[0], e.shape[1], values)?);
    }
    let model = ModelParams {
        dims: manifest.dims,
        params,
    };
    model.check_architecture()?;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

//! Checkpoint serialization (`TTNLAB01` container).
//!
//! The JSON header carries the layer specs, model metadata, and an array
//! manifest (name, shape, byte offset into the payload); the payload is the
//! concatenation of all parameter arrays in manifest order. Serialization is
//! byte-deterministic: struct field order fixes the JSON, layer order fixes
//! the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, CHECKPOINT_MAGIC, CONTAINER_VERSION};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{BnParams, LayerParams, ModelCheckpoint, ModelMeta};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
    arrays: Vec<ArrayEntry>,
}

/// Arrays a layer contributes to the payload, in fixed order.
fn layer_array_names(spec: &LayerSpec) -> &'static [&'static str] {
    match spec {
        LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => &["weight", "bias"],
        LayerSpec::BatchNorm2d { .. } => &["gamma", "beta", "running_mean", "running_var"],
        _ => &[],
    }
}

fn collect_arrays(model: &ModelCheckpoint) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (i, (spec, params)) in model.layers().iter().zip(model.params().iter()).enumerate() {
        let push = |out: &mut Vec<_>, field: &str, shape: Vec<usize>, data: Vec<f32>| {
            out.push((format!("layer{i}.{field}"), shape, data));
        };
        match params {
            LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                push(&mut out, "weight", weight.shape().to_vec(), weight.data().to_vec());
                push(&mut out, "bias", vec![bias.len()], bias.clone());
            }
            LayerParams::Bn(p) => {
                push(&mut out, "gamma", vec![p.gamma.len()], p.gamma.clone());
                push(&mut out, "beta", vec![p.beta.len()], p.beta.clone());
                push(&mut out, "running_mean", vec![p.running_mean.len()], p.running_mean.clone());
                push(&mut out, "running_var", vec![p.running_var.len()], p.running_var.clone());
            }
            LayerParams::None => debug_assert!(layer_array_names(spec).is_empty()),
        }
    }
    out
}

pub fn serialize_checkpoint(model: &ModelCheckpoint) -> Result<Vec<u8>> {
    model.validate()?;
    let arrays = collect_arrays(model);
    let mut manifest = Vec::with_capacity(arrays.len());
    let mut payload = Vec::new();
    let mut offset = 0u64;
    for (name, shape, data) in &arrays {
        manifest.push(ArrayEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += (data.len() * 4) as u64;
        payload.extend_from_slice(data);
    }
    let header = CheckpointHeader {
        version: CONTAINER_VERSION,
        meta: model.meta().clone(),
        layers: model.layers().to_vec(),
        arrays: manifest,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Malformed(format!("header serialization: {e}")))?;
    Ok(container::encode(CHECKPOINT_MAGIC, &header_bytes, &payload))
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let (header_bytes, payload) = container::decode(bytes, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Malformed(format!("header JSON: {e}")))?;
    container::check_version(header.version)?;

    // Walk the manifest, slicing each declared array out of the payload.
    let mut cursor = 0usize;
    let mut entries = header.arrays.iter();
    let mut take = |expected_name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = entries
            .next()
            .ok_or_else(|| Error::Malformed(format!("manifest is missing array {expected_name}")))?;
        if entry.name != expected_name {
            return Err(Error::Malformed(format!(
                "manifest array {} where {expected_name} was expected",
                entry.name
            )));
        }
        if entry.offset != (cursor * 4) as u64 {
            return Err(Error::Malformed(format!(
                "array {} declares offset {}, payload cursor is {}",
                entry.name,
                entry.offset,
                cursor * 4
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::Malformed(format!("array {} has invalid shape {:?}", entry.name, entry.shape)));
        }
        if cursor + count > payload.len() {
            return Err(Error::Truncated(format!(
                "array {} declares {count} floats at offset {}, payload has {}",
                entry.name,
                entry.offset,
                payload.len()
            )));
        }
        let data = payload[cursor..cursor + count].to_vec();
        cursor += count;
        Ok((entry.shape.clone(), data))
    };

    let mut params = Vec::with_capacity(header.layers.len());
    for (i, spec) in header.layers.iter().enumerate() {
        match spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                let (wshape, wdata) = take(&format!("layer{i}.weight"))?;
                let (bshape, bdata) = take(&format!("layer{i}.bias"))?;
                if bshape.len() != 1 {
                    return Err(Error::Malformed(format!("layer{i}.bias must be rank 1, got {bshape:?}")));
                }
                let weight = Tensor::new(wshape, wdata)?;
                if matches!(spec, LayerSpec::Conv2d { .. }) {
                    params.push(LayerParams::Conv { weight, bias: bdata });
                } else {
                    params.push(LayerParams::Linear { weight, bias: bdata });
                }
            }
            LayerSpec::BatchNorm2d { .. } => {
                let (_, gamma) = take(&format!("layer{i}.gamma"))?;
                let (_, beta) = take(&format!("layer{i}.beta"))?;
                let (_, running_mean) = take(&format!("layer{i}.running_mean"))?;
                let (_, running_var) = take(&format!("layer{i}.running_var"))?;
                params.push(LayerParams::Bn(BnParams { gamma, beta, running_mean, running_var }));
            }
            _ => params.push(LayerParams::None),
        }
    }
    if entries.next().is_some() {
        return Err(Error::Malformed("manifest declares more arrays than the layers use".into()));
    }
    if cursor != payload.len() {
        return Err(Error::Truncated(format!(
            "manifest consumes {cursor} floats, payload has {}",
            payload.len()
        )));
    }
    ModelCheckpoint::new(header.layers, params, header.meta)
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    container::write_file(path, &serialize_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    deserialize_checkpoint(&container::read_file(path)?)
}

impl ModelCheckpoint {
    /// Hex SHA-256 of the serialized checkpoint; score tables store this to
    /// detect model/table mismatches.
    pub fn digest(&self) -> Result<String> {
        let bytes = serialize_checkpoint(self)?;
        let hash = Sha256::digest(&bytes);
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}

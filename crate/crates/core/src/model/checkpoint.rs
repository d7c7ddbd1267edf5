//! Versioned checkpoint format.
//!
//! ```text
//! "DABN1" | u64 LE manifest length | JSON manifest | tensor blobs
//! ```
//!
//! The manifest records the architecture, label map, training
//! hyperparameters (including the seed) and, in blob order, the name,
//! dtype and shape of every tensor. Weights are stored as little-endian
//! `f32`; running statistics and epsilon as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bn::BnLayerState;
use crate::error::{Error, Result};
use crate::model::arch::{ArchConfig, TrainHyper};
use crate::model::network::TrainedModel;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DABN1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch: ArchConfig,
    label_map: Vec<String>,
    hyper: TrainHyper,
    seed: u64,
    train_momentum: f64,
    online_momentum: f64,
    tensors: Vec<TensorEntry>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

fn shapes(model: &TrainedModel) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for l in &model.conv {
        out.push(vec![l.out_ch, l.in_ch, l.kernel]);
        out.push(vec![l.out_ch]);
    }
    let (dr, dc) = model.dense.weight.shape();
    let (cr, cc) = model.classifier.weight.shape();
    let width = model.bn.width();
    out.extend([vec![dr, dc], vec![dr], vec![width], vec![width], vec![cr, cc], vec![cr]]);
    out
}

fn stat_tensors(bn: &BnLayerState) -> [(&'static str, Vec<f64>); 3] {
    [
        ("bn.running_mean", bn.running_means()),
        ("bn.running_var", bn.running_vars()),
        ("bn.epsilon", bn.channels.iter().map(|c| c.epsilon).collect()),
    ]
}

pub fn encode_checkpoint(model: &TrainedModel) -> Vec<u8> {
    let names = model.param_names();
    let weights = model.param_tensors();
    let stats = stat_tensors(&model.bn);
    let mut entries: Vec<TensorEntry> = names
        .iter()
        .zip(shapes(model))
        .map(|(name, shape)| TensorEntry {
            name: name.clone(),
            dtype: Dtype::F32,
            shape,
        })
        .collect();
    entries.extend(stats.iter().map(|(name, v)| TensorEntry {
        name: name.to_string(),
        dtype: Dtype::F64,
        shape: vec![v.len()],
    }));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        label_map: model.label_map.clone(),
        hyper: model.hyper.clone(),
        seed: model.hyper.seed,
        train_momentum: model.bn.train_momentum,
        online_momentum: model.bn.online_momentum,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &weights {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for (_, t) in &stats {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let json = bytes
        .get(pos..pos.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest"))?;
    pos += len;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.format_version)));
    }

    let mut model = TrainedModel::zeroed(&manifest.arch, manifest.label_map.clone(), &manifest.hyper)?;
    model.bn.train_momentum = manifest.train_momentum;
    model.bn.online_momentum = manifest.online_momentum;
    let names = model.param_names();
    let expected_shapes = shapes(&model);

    let mut blobs: Vec<(String, Vec<f64>)> = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let nbytes = count * entry.dtype.width();
        let raw = bytes
            .get(pos..pos + nbytes)
            .ok_or_else(|| bad(format!("truncated tensor {}", entry.name)))?;
        pos += nbytes;
        let values = match entry.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        blobs.push((entry.name.clone(), values));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }

    let lookup = |name: &str| -> Result<(&TensorEntry, &Vec<f64>)> {
        let i = manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        Ok((&manifest.tensors[i], &blobs[i].1))
    };
    let mut weights = Vec::with_capacity(names.len());
    for (name, shape) in names.iter().zip(&expected_shapes) {
        let (entry, values) = lookup(name)?;
        if &entry.shape != shape {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", entry.shape)));
        }
        weights.push(values.clone());
    }
    model.update_params(|views| {
        for (v, w) in views.iter_mut().zip(&weights) {
            v.copy_from_slice(w);
        }
        Ok(())
    })?;
    let width = model.bn.width();
    let stat = |name: &str| -> Result<Vec<f64>> {
        let (_, v) = lookup(name)?;
        if v.len() != width {
            return Err(bad(format!("tensor {name} has {} values, expected {width}", v.len())));
        }
        Ok(v.clone())
    };
    let (means, vars, eps) = (stat("bn.running_mean")?, stat("bn.running_var")?, stat("bn.epsilon")?);
    for (i, ch) in model.bn.channels.iter_mut().enumerate() {
        ch.running_mean = means[i];
        ch.running_var = vars[i];
        ch.epsilon = eps[i];
    }
    if !model.is_finite() {
        return Err(bad("non-finite or invalid values"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Binary cache for processed datasets.
//!
//! Layout: magic `DABNDS1`, a little-endian `u64` manifest length, the
//! JSON manifest, then every window in user order as `u32` subject,
//! `u32` label, `u64` index and `window_len * 3` little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::types::{Dataset, PipelineDescriptor, SubjectId, Window};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 7] = b"DABNDS1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    pipeline: PipelineDescriptor,
    window_len: usize,
    stride: usize,
    label_map: Vec<String>,
    raw_counts: BTreeMap<SubjectId, usize>,
    window_counts: BTreeMap<SubjectId, usize>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "dataset cache",
        reason: reason.into(),
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        pipeline: ds.pipeline.clone(),
        window_len: ds.window_len,
        stride: ds.stride,
        label_map: ds.label_map.clone(),
        raw_counts: ds.raw_counts.clone(),
        window_counts: ds.window_counts(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(json.len() + ds.total_windows() * (16 + ds.window_len * 24));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for ws in ds.users.values() {
        for w in ws {
            out.extend_from_slice(&w.subject.0.to_le_bytes());
            out.extend_from_slice(&(w.label as u32).to_le_bytes());
            out.extend_from_slice(&(w.index as u64).to_le_bytes());
            for v in &w.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(DATASET_MAGIC.len())? != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let len = cur.u64()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(cur.take(len)?).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.format_version)));
    }
    let per_window = manifest.window_len * Window::CHANNELS;
    let mut users = BTreeMap::new();
    for (&user, &count) in &manifest.window_counts {
        let mut ws = Vec::with_capacity(count);
        for _ in 0..count {
            let subject = SubjectId(cur.u32()?);
            let label = cur.u32()? as usize;
            let index = cur.u64()? as usize;
            let data = (0..per_window).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            ws.push(Window {
                subject,
                label,
                index,
                data,
            });
        }
        users.insert(user, ws);
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let ds = Dataset {
        label_map: manifest.label_map,
        window_len: manifest.window_len,
        stride: manifest.stride,
        users,
        raw_counts: manifest.raw_counts,
        pipeline: manifest.pipeline,
    };
    ds.validate().map_err(|e| bad(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// SHA-256 of the cache encoding, hex.
pub fn dataset_hash(ds: &Dataset) -> String {
    hex::encode(Sha256::digest(encode_dataset(ds)))
}

//! Layout: 8-byte magic (`M3DNCA`, version, reserved), manifest length as
//! u64 LE, JSON manifest, then little-endian f32 blobs at the manifest's
//! offsets (relative to the end of the manifest).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::nca::{ModelConfig, NcaLayerParams, NcaModel, PARAM_NAMES};
use crate::pipeline::{Checkpoint, TrainMeta};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"M3DNCA";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u8,
    config: ModelConfig,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(levels: &[NcaLayerParams]) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (l, p) in levels.iter().enumerate() {
        for (name, t) in PARAM_NAMES.iter().zip(p.trainable()) {
            out.push((format!("level{l}.{name}"), t));
        }
        out.push((format!("level{l}.bn.running_mean"), &p.bn.running_mean));
        out.push((format!("level{l}.bn.running_var"), &p.bn.running_var));
    }
    out
}

fn named_tensors_mut(levels: &mut [NcaLayerParams]) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for (l, p) in levels.iter_mut().enumerate() {
        let NcaLayerParams {
            perception,
            dense1_weight,
            dense1_bias,
            bn,
            dense2_weight,
            dense2_bias,
        } = p;
        let tensors: [&mut Tensor; 9] = [
            perception,
            dense1_weight,
            dense1_bias,
            &mut bn.gamma,
            &mut bn.beta,
            dense2_weight,
            dense2_bias,
            &mut bn.running_mean,
            &mut bn.running_var,
        ];
        let names = PARAM_NAMES.iter().copied().chain(["bn.running_mean", "bn.running_var"]);
        for (name, t) in names.zip(tensors) {
            out.push((format!("level{l}.{name}"), t));
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(&ckpt.levels) {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blobs.len() as u64,
            bytes: t.size_bytes() as u64,
        });
        blobs.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(0);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    write_bytes(path, &out)
}

/// Load a checkpoint, rejecting anything that does not describe exactly the
/// parameter set of its own configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_bytes(path)?;
    let bad = |reason: String| Error::corrupt(path, reason);
    if bytes.len() < 16 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    if bytes[6] != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: bytes[6],
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if len > body.len() as u64 {
        return Err(bad(format!("manifest length {len} exceeds file size")));
    }
    let (json, blobs) = body.split_at(len as usize);
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("bad manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    manifest.config.validate().map_err(|e| bad(e.to_string()))?;

    // expected names and shapes come from a freshly built model
    let mut model = NcaModel::init(manifest.config.clone(), 0)?;
    let mut slots = named_tensors_mut(&mut model.levels);
    if slots.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, manifest lists {}",
            slots.len(),
            manifest.tensors.len()
        )));
    }
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(slots.len());
    for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(bad(format!(
                "expected {name} {:?}, found {} {:?}",
                slot.shape(),
                entry.name,
                entry.shape
            )));
        }
        let want = slot.size_bytes() as u64;
        let end = entry.offset.checked_add(entry.bytes).filter(|&e| e <= blobs.len() as u64);
        if entry.bytes != want || end.is_none() {
            return Err(bad(format!(
                "tensor {name} at offset {} with {} bytes does not fit {} bytes of data (needs {want})",
                entry.offset,
                entry.bytes,
                blobs.len()
            )));
        }
        spans.push((entry.offset, entry.offset + entry.bytes));
        let raw = &blobs[entry.offset as usize..(entry.offset + entry.bytes) as usize];
        for (v, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(bad("tensor blobs overlap".into()));
    }
    let covered: u64 = spans.iter().map(|s| s.1 - s.0).sum();
    if covered != blobs.len() as u64 {
        return Err(bad(format!("{} trailing bytes not described by the manifest", blobs.len() as u64 - covered)));
    }
    for (name, t) in named_tensors(&model.levels) {
        t.assert_finite(&name).map_err(|e| bad(e.to_string()))?;
    }
    Ok(Checkpoint::from_model(&model, manifest.meta))
}

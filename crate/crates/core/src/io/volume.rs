use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    U8,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::U8 => 1,
        }
    }
}

/// Sidecar describing a raw data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub extents: [usize; 3],
    /// Element type as written; unknown names are rejected on read.
    pub element_type: String,
    pub axis_order: String,
    /// Data file name, relative to the manifest.
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_range: Option<[f64; 2]>,
    /// Multiplier applied to stored integers on read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("raw")
}

/// Write `volume` as f32: a JSON manifest at `path` and the data next to it
/// with a `.raw` extension.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    write_volume_as(volume, path, ElementType::F32)
}

/// Like [`write_volume`]; `U8` stores `round(255 v)` of values clamped to
/// `[0, 1]`, so it is lossless only for masks.
pub fn write_volume_as(volume: &Volume, path: &Path, element_type: ElementType) -> Result<()> {
    let raw = data_path(path);
    let bytes: Vec<u8> = match element_type {
        ElementType::F32 => volume.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ElementType::U8 => volume.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    };
    let manifest = VolumeManifest {
        extents: volume.extents,
        element_type: match element_type {
            ElementType::F32 => "f32".into(),
            ElementType::U8 => "u8".into(),
        },
        axis_order: "zyx".into(),
        data: raw
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("bad volume path {}", path.display())))?,
        spacing_mm: volume.spacing,
        intensity_range: volume.source_range,
        scale: (element_type == ElementType::U8).then_some(1.0 / 255.0),
    };
    write_bytes(&raw, &bytes)?;
    let text = serde_json::to_string_pretty(&manifest)?;
    write_bytes(path, text.as_bytes())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let text = read_bytes(path)?;
    let manifest: VolumeManifest =
        serde_json::from_slice(&text).map_err(|e| Error::corrupt(path, format!("bad volume manifest: {e}")))?;
    let element_type = match manifest.element_type.as_str() {
        "f32" => ElementType::F32,
        "u8" => ElementType::U8,
        other => return Err(Error::UnsupportedFormat(format!("element type {other:?} in {}", path.display()))),
    };
    if manifest.axis_order != "zyx" {
        return Err(Error::UnsupportedFormat(format!("axis order {:?}, only zyx is read", manifest.axis_order)));
    }
    let raw = path.with_file_name(&manifest.data);
    let bytes = read_bytes(&raw)?;
    let n = manifest
        .extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::corrupt(path, "extents overflow"))?;
    let expected = n * element_type.size();
    if bytes.len() != expected {
        return Err(Error::corrupt(
            &raw,
            format!("expected {expected} bytes for {:?} {}, found {}", manifest.extents, manifest.element_type, bytes.len()),
        ));
    }
    let data: Vec<f32> = match element_type {
        ElementType::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        ElementType::U8 => {
            let scale = manifest.scale.unwrap_or(1.0 / 255.0);
            bytes.iter().map(|&b| (b as f64 * scale) as f32).collect()
        }
    };
    let mut volume = Volume::new(manifest.extents, data).map_err(|e| Error::corrupt(path, e.to_string()))?;
    volume.spacing = manifest.spacing_mm;
    volume.source_range = manifest.intensity_range;
    Ok(volume)
}

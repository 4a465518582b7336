use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_any, read_bytes, write_bytes, write_volume, write_volume_as, ElementType};
use crate::error::{Error, Result};
use crate::quality::Case;

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub image: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<DatasetEntry>,
}

/// Write every case into `dir` (images f32, labels u8) and list them in
/// `dir/dataset.json`.
pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        let image = format!("{}_image.json", case.id);
        let label = format!("{}_label.json", case.id);
        write_volume(&case.image, &dir.join(&image))?;
        write_volume_as(&case.label, &dir.join(&label), ElementType::U8)?;
        entries.push(DatasetEntry {
            id: case.id.clone(),
            image,
            label,
        });
    }
    let text = serde_json::to_string_pretty(&DatasetManifest { cases: entries })?;
    write_bytes(&dir.join("dataset.json"), text.as_bytes())
}

/// Read a dataset from its manifest file or from a directory holding
/// `dataset.json`.
pub fn read_dataset(path: &Path) -> Result<Vec<Case>> {
    let manifest_path = if path.is_dir() { path.join("dataset.json") } else { path.to_path_buf() };
    let text = read_bytes(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::corrupt(&manifest_path, format!("bad dataset manifest: {e}")))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .cases
        .iter()
        .map(|e| {
            let image = read_any(&root.join(&e.image))?;
            let label = read_any(&root.join(&e.label))?;
            if image.extents != label.extents {
                return Err(Error::Shape(format!(
                    "case {}: image {:?} and label {:?} differ",
                    e.id, image.extents, label.extents
                )));
            }
            Ok(Case {
                id: e.id.clone(),
                image,
                label,
            })
        })
        .collect()
}

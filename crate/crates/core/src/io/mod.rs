//! On-disk formats: raw volumes with a JSON manifest, a NIfTI-1 reader,
//! checkpoints and dataset listings.

mod checkpoint;
mod dataset;
mod nifti;
mod volume;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{read_dataset, write_dataset, DatasetEntry, DatasetManifest};
pub use nifti::{read_nifti1, read_nifti1_raw};
pub use volume::{read_volume, write_volume, write_volume_as, ElementType, VolumeManifest};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a volume by extension: `.nii` goes through the NIfTI reader,
/// anything else is taken as a volume manifest.
pub fn read_any(path: &Path) -> Result<crate::volume::Volume> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti1(path)
    } else {
        read_volume(path)
    }
}

//! Uncompressed single-file NIfTI-1 (`.nii`), scalar 3D images only.

use std::path::Path;

use super::read_bytes;
use crate::error::{Error, Result};
use crate::volume::{min_max, Volume};

const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }

    fn i32(&self, at: usize) -> i32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.swap { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.swap { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

/// Read a `.nii` file, apply `scl_slope`/`scl_inter` and min-max normalize
/// to `[0, 1]`; the pre-normalization range is kept in `source_range`.
pub fn read_nifti1(path: &Path) -> Result<Volume> {
    let mut volume = read_nifti1_raw(path)?;
    let (lo, hi) = min_max(&volume.data);
    volume.normalize_min_max();
    volume.source_range = Some([lo as f64, hi as f64]);
    Ok(volume)
}

/// The scaled intensities of a `.nii` file, without normalization.
pub fn read_nifti1_raw(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::CorruptFile { reason, .. } => Error::corrupt(path, reason),
        other => other,
    })
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Volume> {
    let bad = |reason: String| Error::corrupt("<nifti>", reason);
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::UnsupportedFormat(
            "gzip-compressed NIfTI; decompress first (e.g. gunzip file.nii.gz)".into(),
        ));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("header needs {HEADER_SIZE} bytes, file has {}", bytes.len())));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::UnsupportedFormat(format!(
            "not a single-file NIfTI-1 image (magic {:?})",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    // dim[0] must be 1..=7; otherwise the header is the other byte order
    let mut r = Reader { bytes, swap: false };
    if !(1..=7).contains(&r.i16(40)) {
        r.swap = true;
        if !(1..=7).contains(&r.i16(40)) {
            return Err(bad("dim[0] is not 1..7 in either byte order".into()));
        }
    }
    if r.i32(0) != HEADER_SIZE as i32 {
        return Err(bad(format!("sizeof_hdr is {}, expected {HEADER_SIZE}", r.i32(0))));
    }
    let ndim = r.i16(40) as usize;
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    if ndim > 4 || (ndim == 4 && dim[4] != 1) {
        return Err(Error::UnsupportedFormat(format!(
            "only 3D scalar images are read, got dim {:?}",
            &dim[..=ndim]
        )));
    }
    let mut size = [1usize; 3];
    for i in 0..ndim.min(3) {
        if dim[i + 1] < 1 {
            return Err(bad(format!("dim[{}] = {}", i + 1, dim[i + 1])));
        }
        size[i] = dim[i + 1] as usize;
    }
    let datatype = r.i16(70);
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "NIfTI datatype {other}; only uint8 (2), int16 (4) and float32 (16) are read"
            )))
        }
    };
    let pixdim: Vec<f32> = (0..4).map(|i| r.f32(76 + 4 * i)).collect();
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(bad(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let n = size[0] * size[1] * size[2];
    let needed = offset + n * elem;
    if bytes.len() < needed {
        return Err(bad(format!("expected at least {needed} bytes for {size:?} voxels, found {}", bytes.len())));
    }
    let slope = r.f32(112);
    let inter = r.f32(116);
    let mut data: Vec<f32> = (0..n)
        .map(|i| {
            let at = offset + i * elem;
            match datatype {
                DT_UINT8 => bytes[at] as f32,
                DT_INT16 => r.i16(at) as f32,
                _ => r.f32(at),
            }
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite voxel at index {i}")));
    }
    // NIfTI is x-fastest with dims (x, y, z): the same memory as our [z, y, x]
    let extents = [size[2], size[1], size[0]];
    let mut volume = Volume::new(extents, data)?;
    let spacing = [pixdim[3], pixdim[2], pixdim[1]];
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        volume.spacing = Some(spacing.map(|s| s as f64));
    }
    Ok(volume)
}

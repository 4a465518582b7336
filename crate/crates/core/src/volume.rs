use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel 3D scalar field, C-order with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub data: Vec<f32>,
    pub spacing: Option<[f64; 3]>,
    /// Intensity range of the source data before normalization.
    pub source_range: Option<[f64; 2]>,
}

impl Volume {
    pub fn new(extents: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if extents.contains(&0) {
            return Err(Error::Shape(format!("volume extents must be positive, got {extents:?}")));
        }
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume {extents:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            extents,
            data,
            spacing: None,
            source_range: None,
        })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            data: vec![0.0; extents.iter().product()],
            spacing: None,
            source_range: None,
        }
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Copy of the box `[origin, origin + extents)`.
    pub fn crop(&self, origin: [usize; 3], extents: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if origin[a] + extents[a] > self.extents[a] || extents[a] == 0 {
                return Err(Error::Geometry(format!(
                    "crop {origin:?}+{extents:?} outside volume {:?}",
                    self.extents
                )));
            }
        }
        let mut out = Vec::with_capacity(extents.iter().product());
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                let s = self.index(origin[0] + z, origin[1] + y, origin[2]);
                out.extend_from_slice(&self.data[s..s + extents[2]]);
            }
        }
        Volume::new(extents, out)
    }

    /// Rescale to `[0, 1]` by min-max; a constant volume becomes all zeros.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = min_max(&self.data);
        let span = hi - lo;
        for v in &mut self.data {
            *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    }

    /// `value > 0.5` as a 0/1 mask.
    pub fn to_mask(&self) -> Vec<u8> {
        binarize(&self.data)
    }
}

pub(crate) fn min_max(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `value > 0.5` as a 0/1 mask.
pub fn binarize(data: &[f32]) -> Vec<u8> {
    data.iter().map(|&v| u8::from(v > 0.5)).collect()
}

/// Axis of a volume, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    #[default]
    X,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            _ => Err(Error::Config(format!("axis must be z, y or x, got {s:?}"))),
        }
    }
}

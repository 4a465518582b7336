//! Synthetic blob volumes, k-space and noise corruptions, and the Dice
//! overlap metric.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{Axis, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere,
    Ellipsoid,
    /// Two overlapping ellipsoids, the smaller centred inside the larger.
    #[default]
    TwoLobe,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "ellipsoid" => Ok(Self::Ellipsoid),
            "two-lobe" => Ok(Self::TwoLobe),
            _ => Err(Error::Spec(format!("unknown shape family {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub extents: [usize; 3],
    pub family: ShapeFamily,
    /// Main radius as a fraction of the smallest extent, `[min, max]`.
    pub radius_range: [f64; 2],
    /// Uniform centre offset as a fraction of each extent.
    pub center_jitter: f64,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub texture_std: f64,
    /// Amplitude of the linear multiplicative bias field.
    pub bias_strength: f64,
    pub count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            extents: [64, 64, 64],
            family: ShapeFamily::TwoLobe,
            radius_range: [0.16, 0.22],
            center_jitter: 0.05,
            foreground_mean: 0.7,
            background_mean: 0.3,
            texture_std: 0.08,
            bias_strength: 0.2,
            count: 64,
        }
    }
}

/// One ellipsoid `Σ((p − centre)/semi)² ≤ 1` in voxel-centre coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lobe {
    pub centre: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Lobe {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.centre[a]) / self.semi_axes[a];
            s += d * d;
        }
        s <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub label: Volume,
    pub lobes: Vec<Lobe>,
}

const LOBE_ELONGATION: [f64; 2] = [0.9, 1.1];
const ELLIPSOID_ELONGATION: [f64; 2] = [0.7, 1.3];
const SECOND_LOBE_SCALE: [f64; 2] = [0.5, 0.8];
const SECOND_LOBE_OFFSET: f64 = 0.75;

impl SyntheticSpec {
    /// Furthest a shape can reach from its centre, in units of the main
    /// radius.
    fn reach(&self) -> f64 {
        match self.family {
            ShapeFamily::Sphere => 1.0,
            ShapeFamily::Ellipsoid => ELLIPSOID_ELONGATION[1],
            ShapeFamily::TwoLobe => {
                let hi = LOBE_ELONGATION[1];
                (SECOND_LOBE_OFFSET * hi + SECOND_LOBE_SCALE[1] * hi).max(hi)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::Spec(format!("extents must be positive, got {:?}", self.extents)));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Spec(format!("bad radius range [{lo}, {hi}]")));
        }
        if !(0.0..0.5).contains(&self.center_jitter) {
            return Err(Error::Spec(format!("centre jitter {} out of [0, 0.5)", self.center_jitter)));
        }
        if self.texture_std < 0.0 || self.bias_strength < 0.0 || self.bias_strength >= 1.0 {
            return Err(Error::Spec("texture std must be ≥ 0 and bias strength in [0, 1)".into()));
        }
        let min_ext = *self.extents.iter().min().unwrap() as f64;
        let r = hi * min_ext * self.reach();
        for &e in &self.extents {
            let half = (e as f64 - 1.0) / 2.0;
            if half - self.center_jitter * e as f64 - r < 0.0 {
                return Err(Error::Spec(format!(
                    "shape of reach {r:.1} voxels does not fit extents {:?}",
                    self.extents
                )));
            }
        }
        Ok(())
    }
}

fn uniform(r: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        r.gen_range(lo..hi)
    }
}

/// `spec.count` samples, each drawn from its own stream of `seed`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| generate_one(spec, rng::derive_seed(seed, rng::stream::SYNTH, i as u64)))
        .collect()
}

fn generate_one(spec: &SyntheticSpec, seed: u64) -> Result<Sample> {
    let mut r = rng::seeded(seed);
    let e = spec.extents;
    let min_ext = *e.iter().min().unwrap() as f64;
    let radius = uniform(&mut r, spec.radius_range) * min_ext;
    let mut centre = [0.0; 3];
    for a in 0..3 {
        let j = spec.center_jitter * e[a] as f64;
        centre[a] = (e[a] as f64 - 1.0) / 2.0 + uniform(&mut r, [-j, j]);
    }
    let axes = |range: [f64; 2], scale: f64, r: &mut rand_chacha::ChaCha8Rng| {
        [
            scale * uniform(r, range),
            scale * uniform(r, range),
            scale * uniform(r, range),
        ]
    };
    let lobes = match spec.family {
        ShapeFamily::Sphere => vec![Lobe {
            centre,
            semi_axes: [radius; 3],
        }],
        ShapeFamily::Ellipsoid => vec![Lobe {
            centre,
            semi_axes: axes(ELLIPSOID_ELONGATION, radius, &mut r),
        }],
        ShapeFamily::TwoLobe => {
            let first = Lobe {
                centre,
                semi_axes: axes(LOBE_ELONGATION, radius, &mut r),
            };
            let scale = uniform(&mut r, SECOND_LOBE_SCALE) * radius;
            let second_axes = axes(LOBE_ELONGATION, scale, &mut r);
            // random direction; the offset keeps the second centre inside
            // the first lobe so the union is one piece
            let dir = loop {
                let v = [
                    r.gen_range(-1.0..1.0f64),
                    r.gen_range(-1.0..1.0f64),
                    r.gen_range(-1.0..1.0f64),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 0.1 && n <= 1.0 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let min_semi = first.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
            let off = SECOND_LOBE_OFFSET * min_semi;
            let second = Lobe {
                centre: [
                    centre[0] + dir[0] * off,
                    centre[1] + dir[1] * off,
                    centre[2] + dir[2] * off,
                ],
                semi_axes: second_axes,
            };
            vec![first, second]
        }
    };
    for l in &lobes {
        for a in 0..3 {
            if l.centre[a] - l.semi_axes[a] < 0.0 || l.centre[a] + l.semi_axes[a] > e[a] as f64 - 1.0 {
                return Err(Error::Spec(format!("shape leaves the volume {e:?}")));
            }
        }
    }

    let vox: usize = e.iter().product();
    let mut label = vec![0.0f32; vox];
    let mut fg = 0usize;
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                let p = [z as f64, y as f64, x as f64];
                if lobes.iter().any(|l| l.contains(p)) {
                    label[(z * e[1] + y) * e[2] + x] = 1.0;
                    fg += 1;
                }
            }
        }
    }
    let frac = fg as f64 / vox as f64;
    if !(0.01..=0.5).contains(&frac) {
        return Err(Error::Spec(format!(
            "foreground fraction {frac:.4} outside [0.01, 0.5]"
        )));
    }

    let noise = Normal::new(0.0, spec.texture_std.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let g = {
        let v = [
            r.gen_range(-1.0..1.0f64),
            r.gen_range(-1.0..1.0f64),
            r.gen_range(-1.0..1.0f64),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let mut image = vec![0.0f32; vox];
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                let i = (z * e[1] + y) * e[2] + x;
                let base = spec.background_mean + (spec.foreground_mean - spec.background_mean) * label[i] as f64;
                let tex = if spec.texture_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
                let p = [
                    z as f64 / e[0] as f64 - 0.5,
                    y as f64 / e[1] as f64 - 0.5,
                    x as f64 / e[2] as f64 - 0.5,
                ];
                let bias = 1.0 + spec.bias_strength * (g[0] * p[0] + g[1] * p[1] + g[2] * p[2]);
                image[i] = ((base + tex) * bias) as f32;
            }
        }
    }
    let mut image = Volume::new(e, image)?;
    image.normalize_min_max();
    Ok(Sample {
        image,
        label: Volume::new(e, label)?,
        lobes,
    })
}

/// `2|A∩B| / (|A| + |B|)` over nonzero entries; 1 when both are empty.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("dice of {} vs {} voxels", a.len(), b.len())));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// An image corruption with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Corruption {
    Noise { std: f64 },
    Spike { intensity: f64, count: usize },
    Ghost { count: usize, intensity: f64, axis: Axis },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::Noise { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(Error::Spec(format!("noise std must be ≥ 0, got {std}")))
            }
            Corruption::Spike { intensity, count } if !(intensity > 0.0) || count == 0 => Err(Error::Spec(
                format!("spike needs intensity > 0 and count ≥ 1, got {intensity}, {count}"),
            )),
            Corruption::Ghost { count, .. } if count < 2 => {
                Err(Error::Spec(format!("ghosting needs at least 2 ghosts, got {count}")))
            }
            Corruption::Ghost { intensity, .. } if !(intensity >= 0.0) => {
                Err(Error::Spec(format!("ghost intensity must be ≥ 0, got {intensity}")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, volume: &Volume, seed: u64) -> Result<Volume> {
        self.validate()?;
        match *self {
            Corruption::Noise { std } => corrupt_noise(volume, std, seed),
            Corruption::Spike { intensity, count } => corrupt_spike(volume, intensity, count, seed),
            Corruption::Ghost { count, intensity, axis } => corrupt_ghost(volume, count, intensity, axis),
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::Noise { std } => write!(f, "noise:{std}"),
            Corruption::Spike { intensity, count } => write!(f, "spike:{intensity}:{count}"),
            Corruption::Ghost { count, intensity, axis } => {
                let a = match axis {
                    Axis::Z => "z",
                    Axis::Y => "y",
                    Axis::X => "x",
                };
                write!(f, "ghost:{count}:{intensity}:{a}")
            }
        }
    }
}

/// `noise:STD`, `spike:INTENSITY[:COUNT]` or `ghost:COUNT:INTENSITY[:AXIS]`.
impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::Spec(format!("corruption {s:?} is missing a field")))?
                .parse::<f64>()
                .map_err(|_| Error::Spec(format!("bad number in corruption {s:?}")))
        };
        let int = |i: usize, default: Option<usize>| -> Result<usize> {
            match (parts.get(i), default) {
                (Some(v), _) => v
                    .parse::<usize>()
                    .map_err(|_| Error::Spec(format!("bad count in corruption {s:?}"))),
                (None, Some(d)) => Ok(d),
                (None, None) => Err(Error::Spec(format!("corruption {s:?} is missing a field"))),
            }
        };
        let c = match parts[0] {
            "noise" if parts.len() == 2 => Corruption::Noise { std: num(1)? },
            "spike" if (2..=3).contains(&parts.len()) => Corruption::Spike {
                intensity: num(1)?,
                count: int(2, Some(1))?,
            },
            "ghost" if (3..=4).contains(&parts.len()) => Corruption::Ghost {
                count: int(1, None)?,
                intensity: num(2)?,
                axis: match parts.get(3) {
                    Some(a) => a.parse()?,
                    None => Axis::X,
                },
            },
            _ => return Err(Error::Spec(format!("unrecognized corruption {s:?}"))),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Noise corruption before clamping.
pub fn noise_raw(volume: &Volume, std: f64, seed: u64) -> Result<Vec<f64>> {
    Corruption::Noise { std }.validate()?;
    if std == 0.0 {
        return Ok(volume.data.iter().map(|&v| v as f64).collect());
    }
    let mut r = rng::seeded(rng::derive_seed(seed, rng::stream::CORRUPTION, 0));
    let n = Normal::new(0.0, std).map_err(|e| Error::Spec(e.to_string()))?;
    Ok(volume.data.iter().map(|&v| v as f64 + n.sample(&mut r)).collect())
}

/// Add i.i.d. `N(0, std²)` noise and clamp to `[0, 1]`.
pub fn corrupt_noise(volume: &Volume, std: f64, seed: u64) -> Result<Volume> {
    if std == 0.0 {
        Corruption::Noise { std }.validate()?;
        return Ok(volume.clone());
    }
    let raw = noise_raw(volume, std, seed)?;
    let mut out = volume.clone();
    for (v, r) in out.data.iter_mut().zip(raw) {
        *v = r.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// A single injected k-space component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spike {
    pub frequency: [usize; 3],
    pub amplitude: f64,
    pub phase: f64,
}

/// Spike corruption before renormalization: the modified volume in f64 and
/// the injected components.
///
/// Each spike adds `intensity · max|X|` with a random phase at a random
/// non-DC frequency and the conjugate value at the mirrored frequency.
pub fn spike_raw(volume: &Volume, intensity: f64, count: usize, seed: u64) -> Result<(Vec<f64>, Vec<Spike>)> {
    Corruption::Spike { intensity, count }.validate()?;
    let e = volume.extents;
    let n: usize = e.iter().product();
    if n < 2 {
        return Err(Error::Spec("spike needs a volume with a non-DC frequency".into()));
    }
    let mut spec: Vec<Complex<f64>> = volume.data.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft3(&mut spec, e, false);
    let peak = spec.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let amplitude = intensity * peak;
    let mut r = rng::seeded(rng::derive_seed(seed, rng::stream::CORRUPTION, 1));
    let mut spikes = Vec::with_capacity(count);
    for _ in 0..count {
        let flat = r.gen_range(1..n);
        let f = [flat / (e[1] * e[2]), (flat / e[2]) % e[1], flat % e[2]];
        let phase = r.gen_range(0.0..std::f64::consts::TAU);
        let mirror = [
            (e[0] - f[0]) % e[0],
            (e[1] - f[1]) % e[1],
            (e[2] - f[2]) % e[2],
        ];
        let at = |g: [usize; 3]| (g[0] * e[1] + g[1]) * e[2] + g[2];
        if mirror == f {
            spec[at(f)] += Complex::new(amplitude * phase.cos(), 0.0);
        } else {
            spec[at(f)] += Complex::from_polar(amplitude, phase);
            spec[at(mirror)] += Complex::from_polar(amplitude, -phase);
        }
        spikes.push(Spike {
            frequency: f,
            amplitude,
            phase,
        });
    }
    fft3(&mut spec, e, true);
    Ok((spec.iter().map(|c| c.re).collect(), spikes))
}

/// k-space spike artifact, renormalized to `[0, 1]`.
pub fn corrupt_spike(volume: &Volume, intensity: f64, count: usize, seed: u64) -> Result<Volume> {
    let (raw, _) = spike_raw(volume, intensity, count, seed)?;
    renormalized(volume, &raw)
}

/// Ghosting before renormalization: along `axis`, every `count`-th k-space
/// line except DC is scaled by `1/(1 + intensity)`.
pub fn ghost_raw(volume: &Volume, count: usize, intensity: f64, axis: Axis) -> Result<Vec<f64>> {
    Corruption::Ghost { count, intensity, axis }.validate()?;
    let e = volume.extents;
    let a = axis.index();
    let len = e[a];
    let stride: usize = e[a + 1..].iter().product();
    let n = volume.voxels();
    let atten = 1.0 / (1.0 + intensity);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = vec![0.0f64; n];
    let mut line = vec![Complex::new(0.0, 0.0); len];
    let outer = n / (len * stride);
    for o in 0..outer {
        for s in 0..stride {
            let base = o * len * stride + s;
            for (i, c) in line.iter_mut().enumerate() {
                *c = Complex::new(volume.data[base + i * stride] as f64, 0.0);
            }
            fwd.process(&mut line);
            for (j, c) in line.iter_mut().enumerate() {
                if j != 0 && j % count == 0 {
                    *c *= atten;
                }
            }
            inv.process(&mut line);
            for (i, c) in line.iter().enumerate() {
                out[base + i * stride] = c.re / len as f64;
            }
        }
    }
    Ok(out)
}

/// Periodic k-space line attenuation along `axis`, renormalized to `[0, 1]`.
pub fn corrupt_ghost(volume: &Volume, count: usize, intensity: f64, axis: Axis) -> Result<Volume> {
    Corruption::Ghost { count, intensity, axis }.validate()?;
    if intensity == 0.0 {
        return Ok(volume.clone());
    }
    let raw = ghost_raw(volume, count, intensity, axis)?;
    renormalized(volume, &raw)
}

fn renormalized(like: &Volume, raw: &[f64]) -> Result<Volume> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let data = raw
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) as f32 } else { 0.0 })
        .collect();
    let mut v = Volume::new(like.extents, data)?;
    v.spacing = like.spacing;
    v.source_range = like.source_range;
    Ok(v)
}

/// In-place 3D DFT; the inverse is scaled by `1/N`.
pub fn fft3(data: &mut [Complex<f64>], extents: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let n: usize = extents.iter().product();
    assert_eq!(data.len(), n, "fft3 buffer does not match extents");
    for a in 0..3 {
        let len = extents[a];
        if len == 1 {
            continue;
        }
        let plan = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let stride: usize = extents[a + 1..].iter().product();
        let outer = n / (len * stride);
        let mut line = vec![Complex::new(0.0, 0.0); len];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for (i, c) in line.iter_mut().enumerate() {
                    *c = data[base + i * stride];
                }
                plan.process(&mut line);
                for (i, c) in line.iter().enumerate() {
                    data[base + i * stride] = *c;
                }
            }
        }
    }
    if inverse {
        let s = 1.0 / n as f64;
        for c in data.iter_mut() {
            *c *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_counts() {
        let a = [1, 1, 1, 1, 0, 0, 0, 0];
        let b = [1, 1, 1, 0, 1, 1, 1, 0];
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dice(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn corruption_strings_round_trip() {
        for s in ["noise:0.5", "spike:5:1", "ghost:6:2.5:x", "ghost:6:2.5:z"] {
            let c: Corruption = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert_eq!("spike:2".parse::<Corruption>().unwrap(), Corruption::Spike { intensity: 2.0, count: 1 });
        assert!("ghost:1:2.5".parse::<Corruption>().is_err());
        assert!("blur:1".parse::<Corruption>().is_err());
        assert!("spike:0".parse::<Corruption>().is_err());
    }

    #[test]
    fn dft_round_trip() {
        let e = [3, 5, 4];
        let orig: Vec<Complex<f64>> = (0..60).map(|i| Complex::new((i as f64 * 0.37).sin(), 0.0)).collect();
        let mut d = orig.clone();
        fft3(&mut d, e, false);
        fft3(&mut d, e, true);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::default();
        assert!(s.validate().is_ok());
        s.radius_range = [0.4, 0.45];
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        let mut s = SyntheticSpec::default();
        s.radius_range = [0.3, 0.2];
        assert!(s.validate().is_err());
    }
}

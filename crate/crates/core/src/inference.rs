//! Full-frame and tiled execution of a trained cascade, pseudo-ensembles and
//! memory planning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::logistic;
use crate::error::{Error, Result};
use crate::nca::{self, MaskKey, ModelConfig, NcaLayerParams, StateGrid, StepScratch};
use crate::ops::{self, AxisMap, BnMode, Ratio, ResampleMode};
use crate::pipeline::{image_pyramid, level_extents, level_factors, Checkpoint};
use crate::quality::{self, NqmDenominator};
use crate::rng;
use crate::volume::{binarize, Volume};

/// Probability volume and its `> 0.5` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub prob: Volume,
    pub mask: Vec<u8>,
}

/// How each step of a run is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    FullFrame,
    /// Memory-budgeted tiles.
    Budget(usize),
    /// Tiles of fixed extents.
    Tiles([usize; 3]),
}

fn check_geometry(volume: &Volume, config: &ModelConfig) -> Result<()> {
    let f = level_factors(config)[0];
    if volume.extents.iter().any(|&e| e < f) {
        return Err(Error::Geometry(format!(
            "volume {:?} is smaller than the coarsest downscale factor {f}",
            volume.extents
        )));
    }
    Ok(())
}

/// Single stochastic pass over the full volume.
pub fn segment(volume: &Volume, ckpt: &Checkpoint, seed: u64) -> Result<Segmentation> {
    run(volume, ckpt, seed, Execution::FullFrame)
}

/// Single pass executed tile by tile within `budget_bytes` of working
/// memory; bit-identical to [`segment`].
pub fn tiled_segment(volume: &Volume, ckpt: &Checkpoint, seed: u64, budget_bytes: usize) -> Result<Segmentation> {
    run(volume, ckpt, seed, Execution::Budget(budget_bytes))
}

/// Single pass with explicit tile extents.
pub fn tiled_segment_with_tile(volume: &Volume, ckpt: &Checkpoint, seed: u64, tile: [usize; 3]) -> Result<Segmentation> {
    run(volume, ckpt, seed, Execution::Tiles(tile))
}

pub fn run(volume: &Volume, ckpt: &Checkpoint, seed: u64, exec: Execution) -> Result<Segmentation> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    check_geometry(volume, cfg)?;
    let images = image_pyramid(volume, cfg)?;
    let extents: Vec<[usize; 3]> = images.iter().map(|v| v.extents).collect();
    let steps = ckpt.inference_steps(&extents)?;
    let tile = match exec {
        Execution::FullFrame => None,
        Execution::Budget(b) => Some(memory_plan_with_steps(volume.extents, cfg, b, &steps)?.tile),
        Execution::Tiles(t) => {
            if t.contains(&0) {
                return Err(Error::Config(format!("tile extents must be positive, got {t:?}")));
            }
            Some(t)
        }
    };
    if tile.is_some() && cfg.inference_bn != BnMode::Eval {
        return Err(Error::Config(
            "tiled execution needs running batch-norm statistics (eval mode)".into(),
        ));
    }
    let c = cfg.channels;
    let factors = level_factors(cfg);
    let linear = cfg.upsample == ResampleMode::Trilinear;
    let mut state = StateGrid::from_image(&images[0].data, extents[0], c, [0, 0, 0])?;
    for (l, params) in ckpt.levels.iter().enumerate() {
        if l > 0 {
            let ratio = (factors[l - 1] / factors[l]) as u32;
            state = upscale_state(&state, extents[l], ratio, linear, &images[l].data)?;
        }
        state = match tile {
            None => run_level_full(&state, params, l, steps[l], seed, cfg.fire_rate, cfg.inference_bn)?,
            Some(t) => run_level_tiled(state, params, l, steps[l], seed, cfg.fire_rate, t)?,
        };
    }
    let prob: Vec<f32> = state.channel(0, nca::LOGIT_CHANNEL).iter().map(|&v| logistic(v)).collect();
    let mask = binarize(&prob);
    let mut prob = Volume::new(volume.extents, prob)?;
    prob.spacing = volume.spacing;
    Ok(Segmentation { prob, mask })
}

/// Nearest (or trilinear) upscale of a whole single-element state, then
/// re-inject the level image into channel 0.
fn upscale_state(state: &StateGrid, dst: [usize; 3], ratio: u32, linear: bool, image: &[f32]) -> Result<StateGrid> {
    let src = state.extents();
    let c = state.channels();
    let maps = [0, 1, 2].map(|a| AxisMap::new(0, src[a], 0, dst[a], Ratio::up(ratio), linear));
    let dvox: usize = dst.iter().product();
    let mut data = vec![0.0f32; c * dvox];
    data[..dvox].copy_from_slice(image);
    for ch in 1..c {
        ops::resample_plane(state.channel(0, ch), src, &maps, linear, &mut data[ch * dvox..(ch + 1) * dvox]);
    }
    Ok(StateGrid {
        tensor: crate::tensor::Tensor::new(vec![1, c, dst[0], dst[1], dst[2]], data)?,
        origins: vec![[0, 0, 0]],
    })
}

fn run_level_full(
    state: &StateGrid,
    params: &NcaLayerParams,
    level: usize,
    steps: usize,
    seed: u64,
    fire_rate: f32,
    bn: BnMode,
) -> Result<StateGrid> {
    let mut s = state.clone();
    for t in 0..steps {
        s = nca::step_full(&s, params, level, t, &[seed], fire_rate, bn)?;
    }
    Ok(s)
}

fn run_level_tiled(
    state: StateGrid,
    params: &NcaLayerParams,
    level: usize,
    steps: usize,
    seed: u64,
    fire_rate: f32,
    tile: [usize; 3],
) -> Result<StateGrid> {
    nca::check_fire_rate(fire_rate)?;
    nca::check_state(&state, params)?;
    let ext = state.extents();
    let shape = state.tensor.shape().to_vec();
    let mut cur = state.tensor.into_data();
    let mut next = vec![0.0f32; cur.len()];
    for t in 0..steps {
        step_tiled(&cur, &mut next, ext, params, tile, level, t, seed, fire_rate)?;
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(StateGrid {
        tensor: crate::tensor::Tensor::new(shape, cur)?,
        origins: vec![[0, 0, 0]],
    })
}

/// Tile boxes `(lo, extent)` along one axis.
fn axis_tiles(extent: usize, tile: usize) -> Vec<(usize, usize)> {
    let t = tile.min(extent).max(1);
    (0..extent).step_by(t).map(|lo| (lo, t.min(extent - lo))).collect()
}

/// One update of a whole single-element grid (`c` planes of `extents`,
/// origin zero), sweeping tiles with halo `(k − 1)/2`: read `cur`, write
/// `next`. Working memory is one tile-plus-halo input buffer, one tile
/// output buffer and the dense-layer scratch.
#[allow(clippy::too_many_arguments)]
pub fn step_tiled(
    cur: &[f32],
    next: &mut [f32],
    extents: [usize; 3],
    params: &NcaLayerParams,
    tile: [usize; 3],
    level: usize,
    step: usize,
    seed: u64,
    fire_rate: f32,
) -> Result<()> {
    let c = params.channels();
    let vox: usize = extents.iter().product();
    if cur.len() != c * vox || next.len() != c * vox {
        return Err(Error::Shape(format!(
            "tiled step buffers must hold {c} x {extents:?}"
        )));
    }
    let r = params.kernel() / 2;
    let tz = axis_tiles(extents[0], tile[0]);
    let ty = axis_tiles(extents[1], tile[1]);
    let tx = axis_tiles(extents[2], tile[2]);
    let max_in = [0, 1, 2].map(|a| (tile[a].min(extents[a]) + 2 * r).min(extents[a]));
    let max_out = [0, 1, 2].map(|a| tile[a].min(extents[a]));
    let mut inbuf = vec![0.0f32; c * max_in.iter().product::<usize>()];
    let mut outbuf = vec![0.0f32; c * max_out.iter().product::<usize>()];
    let mut scratch = StepScratch::new(params);
    let key = MaskKey {
        seed,
        level,
        step,
        fire_rate,
    };
    for &(z0, ez) in &tz {
        for &(y0, ey) in &ty {
            for &(x0, ex) in &tx {
                let lo = [z0, y0, x0];
                let ext = [ez, ey, ex];
                let hlo = [0, 1, 2].map(|a| lo[a].saturating_sub(r));
                let hhi = [0, 1, 2].map(|a| (lo[a] + ext[a] + r).min(extents[a]));
                let hext = [0, 1, 2].map(|a| hhi[a] - hlo[a]);
                let hvox: usize = hext.iter().product();
                let evox: usize = ext.iter().product();
                for ch in 0..c {
                    let src = &cur[ch * vox..(ch + 1) * vox];
                    let dst = &mut inbuf[ch * hvox..(ch + 1) * hvox];
                    for z in 0..hext[0] {
                        for y in 0..hext[1] {
                            let s = ((hlo[0] + z) * extents[1] + hlo[1] + y) * extents[2] + hlo[2];
                            let d = (z * hext[1] + y) * hext[2];
                            dst[d..d + hext[2]].copy_from_slice(&src[s..s + hext[2]]);
                        }
                    }
                }
                nca::step_region(
                    &inbuf[..c * hvox],
                    hext,
                    hlo,
                    [lo[0] - hlo[0], lo[1] - hlo[1], lo[2] - hlo[2]],
                    ext,
                    params,
                    &key,
                    &mut scratch,
                    &mut outbuf[..c * evox],
                );
                for ch in 0..c {
                    let src = &outbuf[ch * evox..(ch + 1) * evox];
                    let dst = &mut next[ch * vox..(ch + 1) * vox];
                    for z in 0..ext[0] {
                        for y in 0..ext[1] {
                            let d = ((lo[0] + z) * extents[1] + lo[1] + y) * extents[2] + lo[2];
                            let s = (z * ext[1] + y) * ext[2];
                            dst[d..d + ext[2]].copy_from_slice(&src[s..s + ext[2]]);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per-level part of a tile plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub extents: [usize; 3],
    pub halo: usize,
    pub steps: usize,
    pub tiles: usize,
    /// Double-buffer bytes of the largest tile including its halo, plus the
    /// update network's scratch.
    pub buffer_bytes: usize,
    /// Voxel updates including halo reads, summed over tiles and steps.
    pub work: u64,
}

/// Tile geometry and memory estimate for budgeted execution. Each step of
/// each level reads one full-grid buffer and writes the other, tile by tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tile: [usize; 3],
    pub levels: Vec<LevelSchedule>,
    /// `max(level buffers) + parameter bytes`.
    pub estimated_peak_bytes: usize,
    /// The two full-grid state buffers of the finest level, held outside the
    /// tile working set.
    pub resident_bytes: usize,
    pub total_work: u64,
}

impl TilePlan {
    pub fn tile_voxels(&self) -> usize {
        self.tile.iter().product()
    }
}

fn param_bytes(config: &ModelConfig) -> usize {
    // trainable tensors plus two running statistics per hidden unit
    (nca::param_count(config) + 2 * config.hidden * config.levels) * 4
}

fn plan_for_edge(extents: &[[usize; 3]], config: &ModelConfig, steps: &[usize], edge: usize) -> TilePlan {
    let c = config.channels;
    let halos = config.halos();
    let mut levels = Vec::with_capacity(extents.len());
    let mut tile = [0; 3];
    for (l, e) in extents.iter().enumerate() {
        let r = halos[l];
        let t = [0, 1, 2].map(|a| edge.min(e[a]));
        if l + 1 == extents.len() {
            tile = t;
        }
        let incl: usize = (0..3).map(|a| (t[a] + 2 * r).min(e[a])).product();
        let mut per_axis = [0u64; 3];
        let mut tiles = 1usize;
        for a in 0..3 {
            let boxes = axis_tiles(e[a], t[a]);
            tiles *= boxes.len();
            per_axis[a] = boxes
                .iter()
                .map(|&(lo, len)| ((lo + len + r).min(e[a]) - lo.saturating_sub(r)) as u64)
                .sum();
        }
        levels.push(LevelSchedule {
            extents: *e,
            halo: r,
            steps: steps[l],
            tiles,
            buffer_bytes: 2 * c * incl * 4 + StepScratch::bytes(c, config.hidden, t[2]),
            work: steps[l] as u64 * per_axis.iter().product::<u64>(),
        });
    }
    let last = extents[extents.len() - 1];
    TilePlan {
        tile,
        estimated_peak_bytes: levels.iter().map(|l| l.buffer_bytes).max().unwrap_or(0) + param_bytes(config),
        resident_bytes: 2 * c * last.iter().product::<usize>() * 4,
        total_work: levels.iter().map(|l| l.work).sum(),
        levels,
    }
}

/// Largest cubic tile (clipped to each level's extents) whose estimate fits
/// `budget_bytes`. Step counts follow the runtime-extent rule.
pub fn memory_plan(volume_extents: [usize; 3], config: &ModelConfig, budget_bytes: usize) -> Result<TilePlan> {
    let ext = level_extents(volume_extents, config)?;
    let steps = config
        .kernel_sizes
        .iter()
        .zip(&ext)
        .map(|(&k, &e)| nca::step_count(e, k))
        .collect::<Result<Vec<_>>>()?;
    memory_plan_with_steps(volume_extents, config, budget_bytes, &steps)
}

pub fn memory_plan_with_steps(
    volume_extents: [usize; 3],
    config: &ModelConfig,
    budget_bytes: usize,
    steps: &[usize],
) -> Result<TilePlan> {
    config.validate()?;
    if budget_bytes == 0 {
        return Err(Error::Config("memory budget must be positive".into()));
    }
    let ext = level_extents(volume_extents, config)?;
    if steps.len() != ext.len() {
        return Err(Error::Config(format!("{} step counts for {} levels", steps.len(), ext.len())));
    }
    let min_edge = *config.kernel_sizes.iter().max().unwrap();
    let max_edge = *volume_extents.iter().max().unwrap();
    let minimal = plan_for_edge(&ext, config, steps, min_edge.min(max_edge));
    if minimal.estimated_peak_bytes > budget_bytes {
        return Err(Error::MemoryPlan {
            budget: budget_bytes as u64,
            minimal: minimal.estimated_peak_bytes as u64,
        });
    }
    // the estimate is non-decreasing in the edge, so bisect
    let (mut lo, mut hi) = (min_edge.min(max_edge), max_edge);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if plan_for_edge(&ext, config, steps, mid).estimated_peak_bytes <= budget_bytes {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(plan_for_edge(&ext, config, steps, lo))
}

/// `N` stochastic passes reduced to mean, population standard deviation and
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub extents: [usize; 3],
    pub mean_prob: Vec<f32>,
    pub sd_map: Vec<f32>,
    /// `mean_prob > 0.5`.
    pub mask: Vec<u8>,
    pub n_members: usize,
    /// Quality score; absent for a single member.
    pub nqm: Option<f64>,
    pub members: Vec<Vec<f32>>,
}

/// Member seeds are hashed from `seed` and the member index.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    rng::derive_seed(seed, rng::stream::ENSEMBLE_MEMBER, member as u64)
}

pub fn ensemble_segment(volume: &Volume, ckpt: &Checkpoint, n: usize, seed: u64) -> Result<EnsembleResult> {
    ensemble_segment_with(volume, ckpt, n, seed, Execution::FullFrame)
}

pub fn ensemble_segment_with(
    volume: &Volume,
    ckpt: &Checkpoint,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleResult> {
    if n == 0 {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    }
    let members = (0..n)
        .into_par_iter()
        .map(|i| run(volume, ckpt, member_seed(seed, i), exec).map(|s| s.prob.data))
        .collect::<Result<Vec<_>>>()?;
    let (mean, sd) = quality::moments(&members)?;
    let mean_prob: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
    let sd_map: Vec<f32> = sd.iter().map(|&v| v as f32).collect();
    let nqm = if n >= 2 {
        Some(quality::nqm_from_moments(&mean, &sd, NqmDenominator::Mean))
    } else {
        None
    };
    Ok(EnsembleResult {
        extents: volume.extents,
        mask: binarize(&mean_prob),
        mean_prob,
        sd_map,
        n_members: n,
        nqm,
        members,
    })
}

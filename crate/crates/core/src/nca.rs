//! The cell-update rule, its iteration, and parameter accounting.
//!
//! One update computes, at every voxel,
//! `u = dense2(relu(bn(dense1([perceive(s); s]))))` and applies
//! `s' = s + u ⊙ M`, where `M` is a per-voxel Bernoulli(fire_rate) draw keyed
//! by global coordinates. Channel 0 carries the input image and is restored
//! after each update; channel 1 is the segmentation logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, NodeId, Tape};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, BnMode, ResampleMode};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_CHANNEL: usize = 0;
pub const LOGIT_CHANNEL: usize = 1;

/// How many steps a level runs at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepPolicy {
    /// Recompute from the extents of the grid actually being iterated.
    RuntimeExtent,
    /// Reuse the step counts the model was trained with.
    #[default]
    FrozenTrainingExtent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of levels `n`.
    pub levels: usize,
    /// Scale factor `d` between consecutive levels.
    pub scale_factor: usize,
    /// Perception kernel size per level, coarsest first.
    pub kernel_sizes: Vec<usize>,
    /// State channels `c`.
    pub channels: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    pub fire_rate: f32,
    pub step_policy: StepPolicy,
    /// Downscale the coarsest level by `d^n` instead of `d^(n-1)`.
    pub legacy_extra_downscale: bool,
    /// Upscaling of the state between levels (nearest or trilinear).
    pub upsample: ResampleMode,
    /// Batch-norm statistics used at inference.
    pub inference_bn: BnMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ModelConfig {
    /// Two levels, scale 4, kernels 7 then 3, `c = 16`, `h = 64`.
    pub fn standard() -> Self {
        Self {
            levels: 2,
            scale_factor: 4,
            kernel_sizes: vec![7, 3],
            channels: 16,
            hidden: 64,
            fire_rate: 0.5,
            step_policy: StepPolicy::default(),
            legacy_extra_downscale: false,
            upsample: ResampleMode::Nearest,
            inference_bn: BnMode::Eval,
        }
    }

    /// Three levels, scale 2, kernels 7, 3, 3.
    pub fn three_level() -> Self {
        Self {
            levels: 3,
            scale_factor: 2,
            kernel_sizes: vec![7, 3, 3],
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("at least one level is required".into()));
        }
        if self.kernel_sizes.len() != self.levels {
            return Err(Error::Config(format!(
                "{} kernel sizes for {} levels",
                self.kernel_sizes.len(),
                self.levels
            )));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0 || k == 0) {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if self.channels < 2 {
            return Err(Error::Config(format!(
                "need at least 2 channels (image + logit), got {}",
                self.channels
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        check_fire_rate(self.fire_rate)?;
        if self.levels > 1 && self.scale_factor < 2 {
            return Err(Error::Config(format!(
                "scale factor must be at least 2, got {}",
                self.scale_factor
            )));
        }
        if !matches!(self.upsample, ResampleMode::Nearest | ResampleMode::Trilinear) {
            return Err(Error::Config("state upsampling must be nearest or trilinear".into()));
        }
        Ok(())
    }

    /// `halo` = `(k − 1)/2` per level.
    pub fn halos(&self) -> Vec<usize> {
        self.kernel_sizes.iter().map(|k| k / 2).collect()
    }
}

pub(crate) fn check_fire_rate(rate: f32) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("fire rate must be in (0, 1], got {rate}")));
    }
    Ok(())
}

/// Learnable parameters of one level's update rule plus its batch-norm
/// running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NcaLayerParams {
    /// Depthwise perception kernels `[c, k, k, k]`, no bias.
    pub perception: Tensor,
    pub dense1_weight: Tensor,
    pub dense1_bias: Tensor,
    pub bn: BatchNormParams,
    pub dense2_weight: Tensor,
    pub dense2_bias: Tensor,
}

/// Names of the trainable tensors, in [`NcaLayerParams::trainable`] order.
pub const PARAM_NAMES: [&str; 7] = [
    "perception",
    "dense1.weight",
    "dense1.bias",
    "bn.gamma",
    "bn.beta",
    "dense2.weight",
    "dense2.bias",
];

impl NcaLayerParams {
    /// Uniform fan-in initialization; the output map starts at zero so the
    /// untrained rule is the identity.
    pub fn init(channels: usize, hidden: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let k3 = kernel * kernel * kernel;
        let pb = 1.0 / (k3 as f32).sqrt();
        let db = 1.0 / ((2 * channels) as f32).sqrt();
        Self {
            perception: Tensor::from_fn(vec![channels, kernel, kernel, kernel], |_| {
                rng.gen_range(-pb..pb)
            }),
            dense1_weight: Tensor::from_fn(vec![hidden, 2 * channels], |_| rng.gen_range(-db..db)),
            dense1_bias: Tensor::from_fn(vec![hidden], |_| rng.gen_range(-db..db)),
            bn: BatchNormParams::new(hidden),
            dense2_weight: Tensor::zeros(vec![channels, hidden]),
            dense2_bias: Tensor::zeros(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.perception.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.dense1_bias.len()
    }

    pub fn kernel(&self) -> usize {
        self.perception.shape()[1]
    }

    pub fn trainable(&self) -> [&Tensor; 7] {
        [
            &self.perception,
            &self.dense1_weight,
            &self.dense1_bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.dense2_weight,
            &self.dense2_bias,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.perception,
            &mut self.dense1_weight,
            &mut self.dense1_bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.dense2_weight,
            &mut self.dense2_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

/// Trainable parameters per level: `c·k³ + (2c·h + h) + 2h + (h·c + c)`.
pub fn level_param_count(channels: usize, hidden: usize, kernel: usize) -> usize {
    let (c, h, k) = (channels, hidden, kernel);
    c * k * k * k + (2 * c * h + h) + 2 * h + (h * c + c)
}

pub fn param_count(config: &ModelConfig) -> usize {
    config
        .kernel_sizes
        .iter()
        .map(|&k| level_param_count(config.channels, config.hidden, k))
        .sum()
}

/// Steps needed for information to cross the grid once:
/// `ceil(max(extent) / ((k − 1)/2))`.
pub fn step_count(extent: [usize; 3], k: usize) -> Result<usize> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::Config(format!(
            "step count needs an odd kernel of at least 3, got {k}"
        )));
    }
    let longest = extent.iter().copied().max().unwrap_or(1).max(1);
    Ok(longest.div_ceil(k / 2))
}

/// One level's parameters for every level of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct NcaModel {
    pub config: ModelConfig,
    pub levels: Vec<NcaLayerParams>,
}

impl NcaModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(rng::derive_seed(seed, rng::stream::INIT, 0));
        let levels = config
            .kernel_sizes
            .iter()
            .map(|&k| NcaLayerParams::init(config.channels, config.hidden, k, &mut r))
            .collect();
        Ok(Self { config, levels })
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(NcaLayerParams::param_count).sum()
    }
}

/// The automaton's state: `[b, c, z, y, x]` plus, per batch element, the
/// grid's offset in full-level coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrid {
    pub tensor: Tensor,
    pub origins: Vec<[usize; 3]>,
}

impl StateGrid {
    /// A single-element grid whose channel 0 is `image` and every other
    /// channel is zero.
    pub fn from_image(image: &[f32], extents: [usize; 3], channels: usize, origin: [usize; 3]) -> Result<Self> {
        let vox: usize = extents.iter().product();
        if image.len() != vox {
            return Err(Error::Shape(format!(
                "image has {} voxels, extents {extents:?} need {vox}",
                image.len()
            )));
        }
        let mut t = Tensor::zeros(vec![1, channels, extents[0], extents[1], extents[2]]);
        t.data_mut()[..vox].copy_from_slice(image);
        Ok(Self {
            tensor: t,
            origins: vec![origin],
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[2], s[3], s[4]]
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn voxels(&self) -> usize {
        self.extents().iter().product()
    }

    /// One channel of one batch element.
    pub fn channel(&self, batch: usize, ch: usize) -> &[f32] {
        let vox = self.voxels();
        let c = self.channels();
        &self.tensor.data()[(batch * c + ch) * vox..][..vox]
    }

    /// `logistic(channel 1)` of one batch element.
    pub fn probabilities(&self, batch: usize) -> Vec<f32> {
        self.channel(batch, LOGIT_CHANNEL).iter().map(|&v| logistic(v)).collect()
    }
}

/// Fire mask of one grid: 1.0 where the cell updates, 0.0 elsewhere.
pub fn fire_mask(extents: [usize; 3], origin: [usize; 3], seed: u64, level: usize, step: usize, fire_rate: f32) -> Vec<f32> {
    let mut m = Vec::with_capacity(extents.iter().product());
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                let g = [
                    (origin[0] + z) as i64,
                    (origin[1] + y) as i64,
                    (origin[2] + x) as i64,
                ];
                m.push(if rng::fires(seed, level, step, g, fire_rate) { 1.0 } else { 0.0 });
            }
        }
    }
    m
}

/// One synchronous update of every cell (inference; no gradient record).
///
/// All batch elements share `seed`; their masks still differ through
/// `origins`.
pub fn nca_step(state: &StateGrid, params: &NcaLayerParams, level: usize, step: usize, seed: u64, fire_rate: f32) -> Result<StateGrid> {
    let seeds = vec![seed; state.batch()];
    step_full(state, params, level, step, &seeds, fire_rate, BnMode::Eval)
}

/// `steps` consecutive updates with step indices `0..steps`.
pub fn nca_run(state: &StateGrid, params: &NcaLayerParams, steps: usize, level: usize, seed: u64, fire_rate: f32) -> Result<StateGrid> {
    nca_run_from(state, params, 0, steps, level, seed, fire_rate)
}

/// Updates with step indices `first..first + steps`.
pub fn nca_run_from(
    state: &StateGrid,
    params: &NcaLayerParams,
    first: usize,
    steps: usize,
    level: usize,
    seed: u64,
    fire_rate: f32,
) -> Result<StateGrid> {
    if steps == 0 {
        return Err(Error::Config("a run needs at least one step".into()));
    }
    let mut s = nca_step(state, params, level, first, seed, fire_rate)?;
    for t in first + 1..first + steps {
        s = nca_step(&s, params, level, t, seed, fire_rate)?;
    }
    Ok(s)
}

pub(crate) fn check_state(state: &StateGrid, params: &NcaLayerParams) -> Result<()> {
    let [b, c, ..] = state.tensor.dims5()?;
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "state has {c} channels, rule expects {}",
            params.channels()
        )));
    }
    if state.origins.len() != b {
        return Err(Error::Shape(format!(
            "{} origins for batch of {b}",
            state.origins.len()
        )));
    }
    Ok(())
}

/// Full-grid update with per-element seeds.
pub(crate) fn step_full(
    state: &StateGrid,
    params: &NcaLayerParams,
    level: usize,
    step: usize,
    seeds: &[u64],
    fire_rate: f32,
    bn: BnMode,
) -> Result<StateGrid> {
    check_fire_rate(fire_rate)?;
    check_state(state, params)?;
    let dims = state.extents();
    let c = state.channels();
    let vox = state.voxels();
    let mut out = Tensor::zeros(state.tensor.shape().to_vec());
    match bn {
        BnMode::Eval => {
            let mut scratch = StepScratch::new(params);
            for bi in 0..state.batch() {
                let src = &state.tensor.data()[bi * c * vox..(bi + 1) * c * vox];
                let dst = &mut out.data_mut()[bi * c * vox..(bi + 1) * c * vox];
                step_region(
                    src,
                    dims,
                    state.origins[bi],
                    [0, 0, 0],
                    dims,
                    params,
                    &MaskKey {
                        seed: seeds[bi],
                        level,
                        step,
                        fire_rate,
                    },
                    &mut scratch,
                    dst,
                );
            }
        }
        BnMode::Train => {
            // batch statistics over the whole grid: evaluate densely through
            // the tape ops without keeping the record
            let mut tape = Tape::new();
            let mut bn_stats = params.bn.clone();
            let s = tape.constant(state.tensor.clone());
            let nodes = LayerNodes::constants(&mut tape, params);
            let key = TapeMaskKey {
                seeds,
                origins: &state.origins,
                level,
                step,
                fire_rate,
            };
            let next = step_on_tape(&mut tape, s, &nodes, &mut bn_stats, BnMode::Train, &key)?;
            out = tape.value(next).clone();
        }
    }
    Ok(StateGrid {
        tensor: out,
        origins: state.origins.clone(),
    })
}

pub(crate) struct MaskKey {
    pub seed: u64,
    pub level: usize,
    pub step: usize,
    pub fire_rate: f32,
}

const CHUNK_VOXELS: usize = 256;

/// Reusable buffers for [`step_region`].
pub(crate) struct StepScratch {
    conv: Vec<f32>,
    x: Vec<f32>,
    h: Vec<f32>,
    u: Vec<f32>,
    denom: Vec<f32>,
    fire: Vec<usize>,
    fire_src: Vec<usize>,
}

impl StepScratch {
    pub fn new(params: &NcaLayerParams) -> Self {
        let (c, h) = (params.channels(), params.hidden());
        Self {
            conv: vec![0.0; CHUNK_VOXELS.max(1) * c],
            x: vec![0.0; CHUNK_VOXELS * 2 * c],
            h: vec![0.0; CHUNK_VOXELS * h],
            u: vec![0.0; CHUNK_VOXELS * c],
            denom: params.bn.eval_denominators(),
            fire: Vec::with_capacity(CHUNK_VOXELS),
            fire_src: Vec::with_capacity(CHUNK_VOXELS),
        }
    }

    /// Heap bytes held for `c` channels, `h` hidden units and rows of
    /// `row` voxels.
    pub fn bytes(c: usize, h: usize, row: usize) -> usize {
        let n = CHUNK_VOXELS.max(row);
        (n * c + n * 2 * c + n * h + n * c + h) * 4 + 2 * n * std::mem::size_of::<usize>()
    }
}

/// Update the voxels of box `[lo, lo + ext)` of a single-element grid `src`
/// (`c` planes of extents `dims`, placed at `origin` globally) and write the
/// new state of that box into `out` (`c` planes of extents `ext`).
///
/// Each voxel's result depends only on its neighbourhood in `src`, so any
/// partition of a grid into boxes reproduces the full-grid update exactly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_region(
    src: &[f32],
    dims: [usize; 3],
    origin: [usize; 3],
    lo: [usize; 3],
    ext: [usize; 3],
    params: &NcaLayerParams,
    key: &MaskKey,
    scratch: &mut StepScratch,
    out: &mut [f32],
) {
    let c = params.channels();
    let h = params.hidden();
    let k = params.kernel();
    let k3 = k * k * k;
    let vox = dims[0] * dims[1] * dims[2];
    let evox = ext[0] * ext[1] * ext[2];
    let rows = (CHUNK_VOXELS / ext[2]).max(1);
    let n_max = rows * ext[2];
    if scratch.conv.len() < n_max * c {
        scratch.conv.resize(n_max * c, 0.0);
        scratch.x.resize(n_max * 2 * c, 0.0);
        scratch.h.resize(n_max * h, 0.0);
        scratch.u.resize(n_max * c, 0.0);
    }
    let (rm, g, bt) = (
        params.bn.running_mean.data(),
        params.bn.gamma.data(),
        params.bn.beta.data(),
    );
    for oz in 0..ext[0] {
        let mut oy = 0;
        while oy < ext[1] {
            let nr = rows.min(ext[1] - oy);
            let n = nr * ext[2];
            let box_lo = [lo[0] + oz, lo[1] + oy, lo[2]];
            let box_ext = [1, nr, ext[2]];
            // perception
            for ch in 0..c {
                ops::conv_plane(
                    &src[ch * vox..(ch + 1) * vox],
                    dims,
                    &params.perception.data()[ch * k3..(ch + 1) * k3],
                    k,
                    box_lo,
                    box_ext,
                    &mut scratch.conv[ch * n..(ch + 1) * n],
                );
            }
            // only firing cells run the update network
            let fire = &mut scratch.fire;
            fire.clear();
            for r in 0..nr {
                let row = rng::FireRow::new(
                    key.seed,
                    key.level,
                    key.step,
                    (origin[0] + box_lo[0]) as i64,
                    (origin[1] + box_lo[1] + r) as i64,
                );
                for x in 0..ext[2] {
                    if row.fires((origin[2] + lo[2] + x) as i64, key.fire_rate) {
                        fire.push(r * ext[2] + x);
                    }
                }
            }
            let nf = fire.len();
            let row0 = (box_lo[0] * dims[1] + box_lo[1]) * dims[2] + lo[2];
            let fsrc = &mut scratch.fire_src;
            fsrc.clear();
            fsrc.extend(fire.iter().map(|&j| row0 + (j / ext[2]) * dims[2] + j % ext[2]));
            if nf > 0 {
                // [perceive(s); s] as a (2c × nf) block
                for ch in 0..c {
                    let conv = &scratch.conv[ch * n..(ch + 1) * n];
                    let plane = &src[ch * vox..(ch + 1) * vox];
                    let (xa, xb) = scratch.x[..2 * c * nf].split_at_mut(c * nf);
                    for (q, (&j, &sj)) in fire.iter().zip(fsrc.iter()).enumerate() {
                        xa[ch * nf + q] = conv[j];
                        xb[ch * nf + q] = plane[sj];
                    }
                }
                ops::dense_block(
                    &scratch.x[..2 * c * nf],
                    2 * c,
                    nf,
                    params.dense1_weight.data(),
                    params.dense1_bias.data(),
                    &mut scratch.h[..h * nf],
                );
                for j in 0..h {
                    for v in &mut scratch.h[j * nf..(j + 1) * nf] {
                        *v = ops::bn_eval_scalar(*v, rm[j], scratch.denom[j], g[j], bt[j]).max(0.0);
                    }
                }
                ops::dense_block(
                    &scratch.h[..h * nf],
                    h,
                    nf,
                    params.dense2_weight.data(),
                    params.dense2_bias.data(),
                    &mut scratch.u[..c * nf],
                );
            }
            let out_base = (oz * ext[1] + oy) * ext[2];
            for ch in 0..c {
                let plane = &mut out[ch * evox + out_base..][..n];
                for (r, row) in plane.chunks_exact_mut(ext[2]).enumerate() {
                    let s0 = ch * vox + row0 + r * dims[2];
                    row.copy_from_slice(&src[s0..s0 + ext[2]]);
                }
                if ch != IMAGE_CHANNEL {
                    for (q, &j) in scratch.fire.iter().enumerate() {
                        plane[j] += scratch.u[ch * nf + q];
                    }
                }
            }
            oy += nr;
        }
    }
}

/// Tape handles of one level's trainable tensors.
pub(crate) struct LayerNodes {
    pub perception: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl LayerNodes {
    pub fn params(tape: &mut Tape, p: &NcaLayerParams) -> Self {
        Self {
            perception: tape.param(p.perception.clone()),
            w1: tape.param(p.dense1_weight.clone()),
            b1: tape.param(p.dense1_bias.clone()),
            gamma: tape.param(p.bn.gamma.clone()),
            beta: tape.param(p.bn.beta.clone()),
            w2: tape.param(p.dense2_weight.clone()),
            b2: tape.param(p.dense2_bias.clone()),
        }
    }

    pub fn constants(tape: &mut Tape, p: &NcaLayerParams) -> Self {
        Self {
            perception: tape.constant(p.perception.clone()),
            w1: tape.constant(p.dense1_weight.clone()),
            b1: tape.constant(p.dense1_bias.clone()),
            gamma: tape.constant(p.bn.gamma.clone()),
            beta: tape.constant(p.bn.beta.clone()),
            w2: tape.constant(p.dense2_weight.clone()),
            b2: tape.constant(p.dense2_bias.clone()),
        }
    }

    pub fn ids(&self) -> [NodeId; 7] {
        [
            self.perception,
            self.w1,
            self.b1,
            self.gamma,
            self.beta,
            self.w2,
            self.b2,
        ]
    }
}

pub(crate) struct TapeMaskKey<'a> {
    pub seeds: &'a [u64],
    pub origins: &'a [[usize; 3]],
    pub level: usize,
    pub step: usize,
    pub fire_rate: f32,
}

/// Record one update on the tape.
pub(crate) fn step_on_tape(
    tape: &mut Tape,
    state: NodeId,
    nodes: &LayerNodes,
    bn: &mut BatchNormParams,
    mode: BnMode,
    key: &TapeMaskKey<'_>,
) -> Result<NodeId> {
    check_fire_rate(key.fire_rate)?;
    let [b, c, z, y, x] = tape.value(state).dims5()?;
    let dims = [z, y, x];
    let vox = z * y * x;
    let perceived = tape.conv(state, nodes.perception)?;
    let v = tape.concat(perceived, state)?;
    let h1 = tape.dense(v, nodes.w1, nodes.b1)?;
    let hn = tape.batchnorm(h1, nodes.gamma, nodes.beta, bn, mode)?;
    let hr = tape.relu(hn);
    let u = tape.dense(hr, nodes.w2, nodes.b2)?;
    let mut mask = Vec::with_capacity(b * vox);
    for bi in 0..b {
        mask.extend(fire_mask(dims, key.origins[bi], key.seeds[bi], key.level, key.step, key.fire_rate));
    }
    let next = tape.masked_add(state, u, mask)?;
    let mut image = Vec::with_capacity(b * vox);
    for bi in 0..b {
        image.extend_from_slice(&tape.value(state).data()[(bi * c + IMAGE_CHANNEL) * vox..][..vox]);
    }
    tape.replace_channel(next, IMAGE_CHANNEL, &image)
}

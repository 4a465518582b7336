//! Multi-level training: resolution pyramids, aligned random patches, batch
//! duplication and the optimization loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LossParams, Tape};
use crate::error::{Error, Result};
use crate::nca::{self, LayerNodes, ModelConfig, NcaLayerParams, NcaModel, StateGrid, StepPolicy, TapeMaskKey};
use crate::ops::{AxisMap, BnMode, Ratio, ResampleMode};
use crate::optim::{adam_step, decayed_lr, AdamHyper, AdamState};
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{binarize, Volume};

/// Downscale factor of every level relative to full resolution, coarsest
/// first.
pub fn level_factors(config: &ModelConfig) -> Vec<usize> {
    let n = config.levels;
    let d = config.scale_factor;
    (0..n)
        .map(|l| {
            let exp = n - 1 - l;
            if l == 0 && config.legacy_extra_downscale {
                d.pow(n as u32)
            } else {
                d.pow(exp as u32)
            }
        })
        .collect()
}

/// Level extents `ceil(full / factor)`.
pub fn level_extents(full: [usize; 3], config: &ModelConfig) -> Result<Vec<[usize; 3]>> {
    level_factors(config)
        .into_iter()
        .map(|f| {
            if full.iter().any(|&e| e < f) {
                return Err(Error::Config(format!(
                    "too many levels for this volume: {full:?} cannot be downscaled by {f}"
                )));
            }
            Ok([full[0].div_ceil(f), full[1].div_ceil(f), full[2].div_ceil(f)])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub extents: [usize; 3],
    pub factor: usize,
    pub image: Vec<f32>,
    pub label: Vec<f32>,
}

/// Image and label at every level; the last level is full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn base_size(&self) -> [usize; 3] {
        self.levels[0].extents
    }
}

/// Images are mean-pooled (a partial trailing block averages the voxels it
/// has), labels take the nearest voxel.
pub fn build_pyramid(image: &Volume, label: &Volume, config: &ModelConfig) -> Result<Pyramid> {
    config.validate()?;
    if image.extents != label.extents {
        return Err(Error::Shape(format!(
            "image {:?} and label {:?} differ",
            image.extents, label.extents
        )));
    }
    let images = image_pyramid(image, config)?;
    let factors = level_factors(config);
    let levels = images
        .into_iter()
        .zip(factors)
        .map(|(img, f)| {
            let label = if f == 1 {
                label.data.clone()
            } else {
                let maps = [0, 1, 2].map(|a| AxisMap::new(0, label.extents[a], 0, img.extents[a], Ratio::down(f as u32), false));
                let mut out = vec![0.0; img.voxels()];
                crate::ops::resample_plane(&label.data, label.extents, &maps, false, &mut out);
                out
            };
            PyramidLevel {
                extents: img.extents,
                factor: f,
                image: img.data,
                label: binarize(&label).into_iter().map(f32::from).collect(),
            }
        })
        .collect();
    Ok(Pyramid { levels })
}

/// The image at every level, coarsest first.
pub fn image_pyramid(image: &Volume, config: &ModelConfig) -> Result<Vec<Volume>> {
    let extents = level_extents(image.extents, config)?;
    let factors = level_factors(config);
    extents
        .into_iter()
        .zip(factors)
        .map(|(ext, f)| {
            if f == 1 {
                return Ok(image.clone());
            }
            let t = Tensor::new(image.extents.to_vec(), image.data.clone())?;
            let r = Ratio::down(f as u32);
            let pooled = crate::ops::resample(&t, [r; 3], ResampleMode::Meanpool)?;
            debug_assert_eq!(pooled.shape(), &ext[..]);
            Volume::new(ext, pooled.into_data())
        })
        .collect()
}

/// Uniform origin of a `base` box inside `[lo, hi)` per axis.
fn sample_origin(lo: [usize; 3], hi: [usize; 3], base: [usize; 3], rng: &mut impl Rng) -> Result<[usize; 3]> {
    let mut o = [0; 3];
    for a in 0..3 {
        if hi[a] < lo[a] + base[a] {
            return Err(Error::Geometry(format!(
                "patch of {base:?} does not fit in [{lo:?}, {hi:?})"
            )));
        }
        o[a] = rng.gen_range(lo[a]..=hi[a] - base[a]);
    }
    Ok(o)
}

/// Crop a random `base_size` patch of a single-element state and its label.
/// The returned origin is in the same global coordinates as
/// `level_state.origins`.
pub fn sample_patch(
    level_state: &StateGrid,
    level_label: &[f32],
    base_size: [usize; 3],
    rng: &mut impl Rng,
) -> Result<(StateGrid, Vec<f32>, [usize; 3])> {
    if level_state.batch() != 1 {
        return Err(Error::Shape("sample_patch takes a single-element state".into()));
    }
    let ext = level_state.extents();
    if level_label.len() != level_state.voxels() {
        return Err(Error::Shape("label does not match state extents".into()));
    }
    let local = sample_origin([0; 3], ext, base_size, rng)?;
    let c = level_state.channels();
    let mut t = Tensor::zeros(vec![1, c, base_size[0], base_size[1], base_size[2]]);
    let pv: usize = base_size.iter().product();
    let crop = |src: &[f32], dst: &mut [f32]| {
        for z in 0..base_size[0] {
            for y in 0..base_size[1] {
                let s = ((local[0] + z) * ext[1] + local[1] + y) * ext[2] + local[2];
                let d = (z * base_size[1] + y) * base_size[2];
                dst[d..d + base_size[2]].copy_from_slice(&src[s..s + base_size[2]]);
            }
        }
    };
    for ch in 0..c {
        crop(level_state.channel(0, ch), &mut t.data_mut()[ch * pv..(ch + 1) * pv]);
    }
    let mut label = vec![0.0; pv];
    crop(level_label, &mut label);
    let g = level_state.origins[0];
    let origin = [g[0] + local[0], g[1] + local[1], g[2] + local[2]];
    Ok((
        StateGrid {
            tensor: t,
            origins: vec![origin],
        },
        label,
        origin,
    ))
}

fn crop_plane(src: &[f32], ext: [usize; 3], origin: [usize; 3], size: [usize; 3], out: &mut Vec<f32>) {
    for z in 0..size[0] {
        for y in 0..size[1] {
            let s = ((origin[0] + z) * ext[1] + origin[1] + y) * ext[2] + origin[2];
            out.extend_from_slice(&src[s..s + size[2]]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Batch elements per optimizer step, replicas included.
    pub batch_size: usize,
    /// Copies of every unique sample within a batch.
    pub dup_factor: usize,
    pub adam: AdamHyper,
    /// Learning-rate multiplier per optimizer step.
    pub lr_decay: f64,
    pub loss: LossParams,
    pub seed: u64,
    /// Steps per level; derived from the base size when absent.
    pub steps: Option<Vec<usize>>,
    /// Evaluate on the held-out split every this many epochs (0 = only at
    /// the end).
    pub eval_every: usize,
    /// Seed of the evaluation passes.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            dup_factor: 2,
            adam: AdamHyper::default(),
            lr_decay: 0.9999,
            loss: LossParams::default(),
            seed: 0,
            steps: None,
            eval_every: 0,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dup_factor == 0 {
            return Err(Error::Config("dup_factor must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % self.dup_factor != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be a positive multiple of dup_factor {}",
                self.batch_size, self.dup_factor
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("learning rate must be positive and decay in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Steps per level for a given base size.
pub fn training_steps(config: &ModelConfig, base: [usize; 3], overrides: Option<&[usize]>) -> Result<Vec<usize>> {
    match overrides {
        Some(s) => {
            if s.len() != config.levels || s.contains(&0) {
                return Err(Error::Config(format!(
                    "need {} positive step counts, got {s:?}",
                    config.levels
                )));
            }
            Ok(s.to_vec())
        }
        None => config.kernel_sizes.iter().map(|&k| nca::step_count(base, k)).collect(),
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Mean loss over batch elements.
    pub loss: f64,
    pub per_element: Vec<f64>,
    /// Gradients per level in [`NcaLayerParams::trainable`] order.
    pub gradients: Vec<Vec<Tensor>>,
    /// Final-level patch origin of every element, full-level coordinates.
    pub origins: Vec<[usize; 3]>,
    /// Bytes held by the tape at the end of the forward pass.
    pub tape_bytes: usize,
}

/// Forward through every level and backpropagate the dice + focal loss of
/// the final patch. Batch-norm running statistics of `model` are updated.
///
/// `seeds` gives the fire-mask seed of each batch element; patch origins are
/// drawn from `rng`.
pub fn train_step(
    batch: &[&Pyramid],
    model: &mut NcaModel,
    steps: &[usize],
    loss_params: LossParams,
    seeds: &[u64],
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let cfg = model.config.clone();
    let n = cfg.levels;
    let b = batch.len();
    if b == 0 || seeds.len() != b {
        return Err(Error::Config(format!("batch of {b} with {} seeds", seeds.len())));
    }
    if steps.len() != n {
        return Err(Error::Config(format!("{} step counts for {n} levels", steps.len())));
    }
    if batch.iter().any(|p| p.levels.len() != n) {
        return Err(Error::Shape(format!("pyramids must have {n} levels")));
    }
    let base = batch[0].base_size();
    if batch.iter().any(|p| p.base_size() != base) {
        return Err(Error::Geometry("batch volumes must share level-1 extents".into()));
    }
    let factors = level_factors(&cfg);
    let c = cfg.channels;
    let bvox: usize = base.iter().product();
    let linear = cfg.upsample == ResampleMode::Trilinear;

    let mut tape = Tape::new();
    let nodes: Vec<LayerNodes> = model.levels.iter().map(|p| LayerNodes::params(&mut tape, p)).collect();

    let mut init = Tensor::zeros(vec![b, c, base[0], base[1], base[2]]);
    for (bi, p) in batch.iter().enumerate() {
        init.data_mut()[bi * c * bvox..][..bvox].copy_from_slice(&p.levels[0].image);
    }
    let mut state = tape.constant(init);
    let mut origins = vec![[0usize; 3]; b];
    for l in 0..n {
        if l > 0 {
            let ratio = factors[l - 1] / factors[l];
            let mut maps = Vec::with_capacity(b);
            let mut image = Vec::with_capacity(b * bvox);
            let mut next = Vec::with_capacity(b);
            for (bi, p) in batch.iter().enumerate() {
                let ext = p.levels[l].extents;
                let o = origins[bi];
                let lo = [o[0] * ratio, o[1] * ratio, o[2] * ratio];
                let hi = [0, 1, 2].map(|a| ((o[a] + base[a]) * ratio).min(ext[a]));
                let po = sample_origin(lo, hi, base, rng)?;
                maps.push([0, 1, 2].map(|a| AxisMap::new(o[a], base[a], po[a], base[a], Ratio::up(ratio as u32), linear)));
                crop_plane(&p.levels[l].image, ext, po, base, &mut image);
                next.push(po);
            }
            state = tape.upsample_crop(state, maps, linear)?;
            state = tape.replace_channel(state, nca::IMAGE_CHANNEL, &image)?;
            origins = next;
        }
        for t in 0..steps[l] {
            let key = TapeMaskKey {
                seeds,
                origins: &origins,
                level: l,
                step: t,
                fire_rate: cfg.fire_rate,
            };
            state = nca::step_on_tape(&mut tape, state, &nodes[l], &mut model.levels[l].bn, BnMode::Train, &key)?;
        }
    }
    let prob = tape.sigmoid_channel(state, nca::LOGIT_CHANNEL)?;
    let mut target = Vec::with_capacity(b * bvox);
    for (bi, p) in batch.iter().enumerate() {
        let last = &p.levels[n - 1];
        crop_plane(&last.label, last.extents, origins[bi], base, &mut target);
    }
    let target = Tensor::new(vec![b, 1, base[0], base[1], base[2]], target)?;
    let loss = tape.dice_focal(prob, &target, loss_params)?;
    let value = tape.value(loss).data()[0] as f64;
    let per_element: Vec<f64> = (0..b)
        .map(|bi| {
            crate::loss::dice_focal_value(
                &tape.value(prob).data()[bi * bvox..(bi + 1) * bvox],
                &target.data()[bi * bvox..(bi + 1) * bvox],
                loss_params,
            )
        })
        .collect();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    let tape_bytes = tape.stored_bytes();
    let grads = tape.backward(loss)?;
    let gradients = nodes
        .iter()
        .map(|ln| ln.ids().iter().map(|&id| grads.wrt(id)).collect())
        .collect();
    Ok(StepOutcome {
        loss: per_element.iter().sum::<f64>() / b as f64,
        per_element,
        gradients,
        origins,
        tape_bytes,
    })
}

/// Metadata stored alongside trained parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMeta {
    pub epoch: usize,
    pub optimizer_steps: u64,
    pub seed: u64,
    /// FNV-1a digest of the per-step loss history.
    pub loss_digest: String,
    pub final_loss: Option<f64>,
    /// Steps per level used in training.
    pub train_steps: Vec<usize>,
    pub base_size: [usize; 3],
    pub eval_dice: Option<f64>,
}

/// A trained model: configuration, parameters with running statistics and
/// training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub levels: Vec<NcaLayerParams>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn from_model(model: &NcaModel, meta: TrainMeta) -> Self {
        Self {
            config: model.config.clone(),
            levels: model.levels.clone(),
            meta,
        }
    }

    pub fn model(&self) -> NcaModel {
        NcaModel {
            config: self.config.clone(),
            levels: self.levels.clone(),
        }
    }

    /// Steps per level for grids of the given extents, per the step policy.
    pub fn inference_steps(&self, level_extents: &[[usize; 3]]) -> Result<Vec<usize>> {
        match self.config.step_policy {
            StepPolicy::FrozenTrainingExtent if self.meta.train_steps.len() == self.config.levels => {
                Ok(self.meta.train_steps.clone())
            }
            StepPolicy::FrozenTrainingExtent => Err(Error::Config(
                "frozen step policy needs the training step counts in the checkpoint".into(),
            )),
            StepPolicy::RuntimeExtent => self
                .config
                .kernel_sizes
                .iter()
                .zip(level_extents)
                .map(|(&k, &e)| nca::step_count(e, k))
                .collect(),
        }
    }
}

pub(crate) fn fnv1a(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub eval_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by held-out Dice, or the last one without a held-out
    /// split.
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Train a fresh model on `(image, label)` pairs.
pub fn train(
    data: &[(Volume, Volume)],
    held_out: &[(Volume, Volume)],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let pyramids = data
        .iter()
        .map(|(i, l)| build_pyramid(i, l, model_config))
        .collect::<Result<Vec<_>>>()?;
    let base = pyramids[0].base_size();
    let steps = training_steps(model_config, base, cfg.steps.as_deref())?;
    let mut model = NcaModel::init(model_config.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.levels.iter().flat_map(|l| l.trainable()));
    let unique = cfg.batch_size / cfg.dup_factor;
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last = None;
    let mut t: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pyramids.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive_seed(cfg.seed, rng::stream::SHUFFLE, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(unique) {
            let batch: Vec<&Pyramid> = chunk
                .iter()
                .flat_map(|&i| std::iter::repeat(&pyramids[i]).take(cfg.dup_factor))
                .collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|j| rng::derive_seed(cfg.seed, rng::stream::BATCH_REPLICA, t * cfg.batch_size as u64 + j as u64))
                .collect();
            let mut prng = rng::seeded(rng::derive_seed(cfg.seed, rng::stream::PATCH, t));
            let out = train_step(&batch, &mut model, &steps, cfg.loss, &seeds, &mut prng)?;
            let grads: Vec<Tensor> = out.gradients.into_iter().flatten().collect();
            let mut hyper = cfg.adam;
            hyper.lr = decayed_lr(cfg.adam.lr, cfg.lr_decay, t);
            let mut params: Vec<&mut Tensor> = model.levels.iter_mut().flat_map(|l| l.trainable_mut()).collect();
            adam_step(&mut params, &grads, &mut adam, hyper)?;
            t += 1;
            losses.push(out.loss);
            epoch_loss += out.loss;
            batches += 1;
        }
        let is_last = epoch + 1 == cfg.epochs;
        let eval_now = !held_out.is_empty() && (is_last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        let meta = TrainMeta {
            epoch: epoch + 1,
            optimizer_steps: t,
            seed: cfg.seed,
            loss_digest: format!("{:016x}", fnv1a(losses.iter().map(|l| l.to_bits()))),
            final_loss: losses.last().copied(),
            train_steps: steps.clone(),
            base_size: base,
            eval_dice: None,
        };
        let mut ckpt = Checkpoint::from_model(&model, meta);
        let mut eval_dice = None;
        if eval_now {
            let d = mean_dice(&ckpt, held_out, cfg.eval_seed)?;
            ckpt.meta.eval_dice = Some(d);
            eval_dice = Some(d);
            if best.as_ref().map_or(true, |(b, _)| d > *b) {
                best = Some((d, ckpt.clone()));
            }
        }
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: epoch_loss / batches as f64,
            lr: decayed_lr(cfg.adam.lr, cfg.lr_decay, t),
            eval_dice,
        };
        progress(&log);
        epochs.push(log);
        last = Some(ckpt);
    }
    let checkpoint = match best {
        Some((_, c)) => c,
        None => last.expect("at least one epoch ran"),
    };
    Ok(TrainOutcome {
        checkpoint,
        epochs,
        losses,
    })
}

/// Mean single-pass Dice of `ckpt` over labelled volumes.
pub fn mean_dice(ckpt: &Checkpoint, cases: &[(Volume, Volume)], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (img, lab) in cases {
        let seg = crate::inference::segment(img, ckpt, seed)?;
        total += crate::synth::dice(&seg.mask, &lab.to_mask())?;
    }
    Ok(total / cases.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn factors_and_extents() {
        let mut c = ModelConfig::three_level();
        assert_eq!(level_factors(&c), vec![4, 2, 1]);
        c.legacy_extra_downscale = true;
        assert_eq!(level_extents([320, 320, 24], &c).unwrap()[0], [40, 40, 3]);
        let s = ModelConfig::standard();
        assert_eq!(
            level_extents([320, 320, 24], &s).unwrap(),
            vec![[80, 80, 6], [320, 320, 24]]
        );
        let one = ModelConfig {
            levels: 1,
            kernel_sizes: vec![3],
            ..ModelConfig::standard()
        };
        assert_eq!(level_extents([5, 6, 7], &one).unwrap(), vec![[5, 6, 7]]);
        assert!(matches!(level_extents([3, 64, 64], &s), Err(Error::Config(_))));
    }

    #[test]
    fn single_level_pyramid_is_identity() {
        let one = ModelConfig {
            levels: 1,
            kernel_sizes: vec![3],
            ..ModelConfig::standard()
        };
        let img = Volume::new([2, 3, 4], (0..24).map(|i| i as f32 / 24.0).collect()).unwrap();
        let lab = Volume::new([2, 3, 4], (0..24).map(|i| (i % 2) as f32).collect()).unwrap();
        let p = build_pyramid(&img, &lab, &one).unwrap();
        assert_eq!(p.levels.len(), 1);
        assert_eq!(p.levels[0].image, img.data);
        assert_eq!(p.levels[0].label, lab.data);
    }

    #[test]
    fn patch_at_full_extent_has_zero_origin() {
        let s = StateGrid::from_image(&[0.5; 27], [3, 3, 3], 2, [0, 0, 0]).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (p, _, o) = sample_patch(&s, &[0.0; 27], [3, 3, 3], &mut r).unwrap();
        assert_eq!(o, [0, 0, 0]);
        assert_eq!(p, s);
        assert!(matches!(
            sample_patch(&s, &[0.0; 27], [4, 3, 3], &mut r),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn train_config_checks() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 3;
        assert!(c.validate().is_err());
        c.batch_size = 4;
        c.dup_factor = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_is_order_sensitive() {
        assert_ne!(fnv1a([1, 2]), fnv1a([2, 1]));
        assert_eq!(fnv1a([7]), fnv1a([7]));
    }
}

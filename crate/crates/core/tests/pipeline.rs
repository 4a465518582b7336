mod common;

use std::collections::HashSet;

use m3dnca::nca::{ModelConfig, NcaModel, StateGrid};
use m3dnca::pipeline::{self, build_pyramid, sample_patch, train, train_step, TrainConfig};
use m3dnca::synth::{self, ShapeFamily, SyntheticSpec};
use m3dnca::volume::Volume;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spheres(n: usize, extent: usize, seed: u64) -> Vec<(Volume, Volume)> {
    let spec = SyntheticSpec {
        extents: [extent; 3],
        family: ShapeFamily::Sphere,
        count: n,
        ..SyntheticSpec::default()
    };
    synth::generate(&spec, seed)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.label))
        .collect()
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        dup_factor: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn patches_cover_every_origin_and_match_the_source() {
    let ext = [6, 7, 8];
    let img: Vec<f32> = (0..6 * 7 * 8).map(|i| i as f32).collect();
    let state = StateGrid::from_image(&img, ext, 3, [10, 20, 30]).unwrap();
    let label: Vec<f32> = img.iter().map(|v| v + 0.5).collect();
    let base = [4, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = HashSet::new();
    for _ in 0..2000 {
        let (p, lab, o) = sample_patch(&state, &label, base, &mut rng).unwrap();
        let local = [o[0] - 10, o[1] - 20, o[2] - 30];
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let s = ((local[0] + z) * ext[1] + local[1] + y) * ext[2] + local[2] + x;
                    let d = (z * 4 + y) * 4 + x;
                    assert_eq!(p.channel(0, 0)[d], img[s]);
                    assert_eq!(lab[d], label[s]);
                }
            }
        }
        assert_eq!(p.origins, vec![o]);
        seen.insert(local);
    }
    // 3 * 4 * 5 reachable origins
    assert_eq!(seen.len(), 60);
}

#[test]
fn final_patches_stay_inside_the_upscaled_parent() {
    let cfg = ModelConfig {
        channels: 4,
        hidden: 8,
        ..ModelConfig::three_level()
    };
    let (img, lab) = common::ball_volume(16, 2);
    let pyr = build_pyramid(&img, &lab, &cfg).unwrap();
    assert_eq!(pyr.base_size(), [4, 4, 4]);
    let mut model = NcaModel::init(cfg.clone(), 1).unwrap();
    let mut seen = HashSet::new();
    for t in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(t);
        let out = train_step(&[&pyr], &mut model, &[1, 1, 1], Default::default(), &[t], &mut rng).unwrap();
        let o = out.origins[0];
        // level 1 origin lies in [0, 4], so the final one lies in [0, 12]
        assert!(o.iter().all(|&v| v <= 12), "{o:?}");
        seen.insert(o);
    }
    assert!(seen.len() > 10);
}

#[test]
fn replicas_differ_only_through_their_seeds() {
    let cfg = ModelConfig {
        levels: 1,
        kernel_sizes: vec![3],
        ..common::small_config()
    };
    let (img, lab) = common::ball_volume(8, 4);
    let pyr = build_pyramid(&img, &lab, &cfg).unwrap();
    let mut model = common::randomized_model(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // a single level at full extent leaves no patch freedom
    let same = train_step(&[&pyr, &pyr], &mut model, &[4], Default::default(), &[7, 7], &mut rng).unwrap();
    assert_eq!(same.per_element[0], same.per_element[1]);
    let diff = train_step(&[&pyr, &pyr], &mut model, &[4], Default::default(), &[7, 8], &mut rng).unwrap();
    assert_ne!(diff.per_element[0], diff.per_element[1]);
}

#[test]
fn gradients_reach_every_level() {
    let cfg = ModelConfig {
        channels: 4,
        hidden: 8,
        ..ModelConfig::three_level()
    };
    let (img, lab) = common::ball_volume(16, 6);
    let pyr = build_pyramid(&img, &lab, &cfg).unwrap();
    let mut model = common::randomized_model(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = train_step(&[&pyr, &pyr], &mut model, &[3, 3, 3], Default::default(), &[1, 2], &mut rng).unwrap();
    assert_eq!(out.gradients.len(), 3);
    for (l, g) in out.gradients.iter().enumerate() {
        let norm: f64 = g.iter().flat_map(|t| t.data()).map(|&v| (v as f64).powi(2)).sum();
        assert!(norm > 0.0 && norm.is_finite(), "level {l} gradient norm {norm}");
    }
}

#[test]
fn one_epoch_bookkeeping() {
    let data = spheres(6, 16, 1);
    let cfg = ModelConfig::standard();
    let mut logs = Vec::new();
    let out = train(&data, &[], &cfg, &small_train(1), |l| logs.push(l.clone())).unwrap();
    // 6 unique samples, 2 per batch
    assert_eq!(out.losses.len(), 3);
    assert_eq!(logs.len(), 1);
    let m = &out.checkpoint.meta;
    assert_eq!(m.epoch, 1);
    assert_eq!(m.optimizer_steps, 3);
    assert_eq!(m.base_size, [4, 4, 4]);
    assert_eq!(m.train_steps.len(), 2);
    assert_eq!(m.final_loss, out.losses.last().copied());
    assert_eq!(m.loss_digest.len(), 16);
    assert!(m.eval_dice.is_none());
    let mean = out.losses.iter().sum::<f64>() / 3.0;
    assert!((logs[0].mean_loss - mean).abs() < 1e-12);
}

#[test]
fn training_is_deterministic() {
    let data = spheres(4, 16, 2);
    let cfg = ModelConfig::standard();
    let a = train(&data, &data[..1], &cfg, &small_train(2), |_| {}).unwrap();
    let b = train(&data, &data[..1], &cfg, &small_train(2), |_| {}).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
}

#[test]
fn smoke_training_learns_spheres() {
    let data = spheres(12, 32, 3);
    let (train_set, held) = data.split_at(8);
    let cfg = ModelConfig::standard();
    let out = train(train_set, held, &cfg, &small_train(8), |_| {}).unwrap();
    let first = out.epochs.first().unwrap().mean_loss;
    let last = out.epochs.last().unwrap().mean_loss;
    assert!(last < first, "loss went from {first} to {last}");
    let d = pipeline::mean_dice(&out.checkpoint, held, 0).unwrap();
    assert!(d > 0.7, "held-out Dice {d}");
}

#[test]
fn tape_memory_follows_the_patch_not_the_volume() {
    let cfg = common::small_config();
    let mut model = common::randomized_model(&cfg, 3);
    let bytes = |n: usize, batch: usize, model: &mut NcaModel| {
        let (img, lab) = common::ball_volume(n, 1);
        let pyr = build_pyramid(&img, &lab, &cfg).unwrap();
        let b: Vec<_> = (0..batch).map(|_| &pyr).collect();
        let seeds: Vec<u64> = (0..batch as u64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&b, model, &[3, 3], Default::default(), &seeds, &mut rng).unwrap().tape_bytes
    };
    // 9³ and 10³ volumes share a 5³ coarse grid
    let small = bytes(9, 1, &mut model);
    assert_eq!(small, bytes(10, 1, &mut model));
    let two = bytes(10, 2, &mut model);
    assert!(two > small && two <= 2 * small, "{small} then {two}");
}

//! Counter-based hashing for reproducible randomness.
//!
//! Every random decision in the cell update is a pure function of a key
//! (seed, level, step, global voxel coordinates), so results never depend on
//! traversal order, tiling or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash an ordered list of words into one 64-bit value.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = GOLDEN;
    for &w in words {
        h = mix64(h.wrapping_add(GOLDEN) ^ w);
    }
    h
}

/// Map a hash to a uniform value in [0, 1) using its top 53 bits.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Derive a child seed, e.g. for an ensemble member or a batch replica.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    hash_words(&[seed, stream, index])
}

/// A sequential generator for draws that have no spatial key (patch origins,
/// synthetic shapes, corruptions).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Whether the cell at `global` fires on (`level`, `step`).
#[inline]
pub fn fires(seed: u64, level: usize, step: usize, global: [i64; 3], fire_rate: f32) -> bool {
    FireRow::new(seed, level, step, global[0], global[1]).fires(global[2], fire_rate)
}

/// [`fires`] along one x-row, with the hash of the shared key words done
/// once.
#[derive(Clone, Copy, Debug)]
pub struct FireRow(u64);

impl FireRow {
    pub fn new(seed: u64, level: usize, step: usize, z: i64, y: i64) -> Self {
        Self(hash_words(&[seed, level as u64, step as u64, z as u64, y as u64]))
    }

    #[inline]
    pub fn fires(self, x: i64, fire_rate: f32) -> bool {
        if fire_rate >= 1.0 {
            return true;
        }
        unit_f64(mix64(self.0.wrapping_add(GOLDEN) ^ x as u64)) < fire_rate as f64
    }
}

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const ENSEMBLE_MEMBER: u64 = 1;
    pub const BATCH_REPLICA: u64 = 2;
    pub const PATCH: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const CORRUPTION: u64 = 7;
}

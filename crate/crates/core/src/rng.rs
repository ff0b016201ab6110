//! Keyed random streams.
//!
//! Every stochastic decision in a run is drawn from a ChaCha stream whose
//! seed is a hash of the run seed and a small tuple of coordinates (sample
//! index, step, stream tag). Draws therefore do not depend on evaluation
//! order, and changing any coordinate gives an unrelated stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, one splitmix round per coordinate.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(GOLDEN))))
}

pub fn keyed(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(seed, parts))
}

/// Stream tags used by the trainer. Distinct tags never share draws.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const WEAK_LABELED: u64 = 3;
    pub const WEAK_UNLABELED: u64 = 4;
    pub const STRONG_UNLABELED: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const SPLIT: u64 = 7;
}

/// Coordinates of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugKey {
    pub seed: u64,
    pub sample: u64,
    pub step: u64,
    pub stream: u64,
}

impl AugKey {
    pub fn new(seed: u64, sample: u64, step: u64, stream: u64) -> Self {
        Self { seed, sample, step, stream }
    }

    pub fn rng(&self) -> Rng {
        keyed(self.seed, &[self.sample, self.step, self.stream])
    }
}

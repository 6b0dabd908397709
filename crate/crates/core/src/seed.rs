//! Seed derivation shared by every stochastic component.
//!
//! Each consumer derives its own stream from the global seed plus a small
//! path of integers (step, instance index, purpose tag), so results do not
//! depend on iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path` into a new 64-bit seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, path: &[u64]) -> Rng {
    rng(derive(base, path))
}

/// Purpose tags keep independent streams apart.
pub mod tag {
    pub const SAMPLE: u64 = 1;
    pub const INSTANCE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CLOZE: u64 = 5;
    pub const ITM: u64 = 6;
    pub const CALIBRATION: u64 = 7;
    pub const GENERATOR: u64 = 8;
}

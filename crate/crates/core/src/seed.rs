//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices (axis indices, trial, stream tag).
/// Distinct paths give statistically independent streams.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| {
        splitmix(acc ^ splitmix(p.wrapping_add(GOLDEN)))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used with [`derive`].
pub mod stream {
    pub const INITIAL_CONDITIONS: u64 = 1;
    pub const INPUT_NOISE: u64 = 2;
    pub const RBF_CENTERS: u64 = 3;
    pub const PROBE: u64 = 4;
}

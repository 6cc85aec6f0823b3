//! Deterministic RNG streams. Every consumer derives its own stream from
//! `(seed, index...)`, so results never depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of indices into a new 64-bit seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i.wrapping_add(0x5851_F42D))))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Stream labels, kept distinct so that different consumers of one seed never collide.
pub mod label {
    pub const SCENE: u64 = 1;
    pub const CAMERA: u64 = 2;
    pub const FIT: u64 = 3;
    pub const DECODER: u64 = 4;
    pub const DIFFUSION: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const REFINE: u64 = 7;
    pub const JITTER: u64 = 8;
    pub const CORPUS: u64 = 9;
}

//! Seed derivation. Every random stream is keyed by a master seed plus a path
//! of integers, so results never depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers.
pub mod keys {
    pub const IMAGE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const EPOCH_PATCH: u64 = 3;
    pub const EPOCH_SHUFFLE: u64 = 4;
    pub const LESION_EVAL: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SEARCH: u64 = 7;
    pub const TRIAL: u64 = 8;
    pub const BOOTSTRAP: u64 = 9;
    pub const BATCH_ORDER: u64 = 10;
    pub const AGG_POOL: u64 = 11;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, path))
}

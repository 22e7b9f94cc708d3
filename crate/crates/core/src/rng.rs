//! Seed derivation so that every image, stage and stream owns an independent
//! generator that does not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a run seed with a stream tag and an index into a fresh seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const BASE_IMAGES: u64 = 2;
    pub const KSHOT_IMAGES: u64 = 3;
    pub const TEST_IMAGES: u64 = 4;
    pub const KSHOT_LAYOUT: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const FINETUNE_INIT: u64 = 7;
    pub const BATCHES: u64 = 8;
    pub const SAMPLING: u64 = 9;
    pub const FEATURIZER: u64 = 10;
    pub const FD_SUBSET: u64 = 11;
}

//! Counter-style seed derivation. Every random stream in a run is keyed by
//! `(seed, scope, purpose)`, so adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, scope: u64, purpose: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ scope) ^ purpose.rotate_left(17))
}

pub fn stream(seed: u64, scope: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, scope, purpose))
}

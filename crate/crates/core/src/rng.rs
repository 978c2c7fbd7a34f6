//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha substream keyed by
//! `(seed, domain, index)`, so episode `i` of a run is reproducible on its own
//! and parallel callers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const DOMAIN_INIT: u64 = 0x01;
pub const DOMAIN_TRAIN: u64 = 0x02;
pub const DOMAIN_EVAL: u64 = 0x03;
pub const DOMAIN_SPLIT: u64 = 0x04;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, domain: u64, index: u64) -> Rng {
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ domain.rotate_left(32);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(index);
    rng
}

//! Derived random streams.
//!
//! Every random draw in the crate comes from a ChaCha generator seeded by
//! hashing the run seed with a stream tag and one or more indices, so a draw
//! never depends on how many draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams derived from the single user seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batch = 3,
    Mode = 4,
    Reverse = 5,
    Perturb = 6,
    Probe = 7,
    Noise = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &k in keys {
        h = splitmix(h ^ k);
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, keys))
}

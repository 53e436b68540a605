//! Seed derivation.
//!
//! Every random stream in a run is derived from the master seed plus a stream
//! tag and an index, so adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Partition = 3,
    Init = 4,
    Client = 5,
    Sampling = 6,
    Shuffle = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream as u64) ^ index)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> Rng {
    rng_from(derive_seed(master, stream, index))
}

//! Counter-based stream splitting.
//!
//! Every Monte Carlo worker draws from `stream(master_seed, index)`: a ChaCha8
//! generator keyed by the master seed with the worker index as its 64-bit
//! stream id. Distinct indices address disjoint keystreams, so results do not
//! depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Default master seed used when none is given.
pub const DEFAULT_SEED: u64 = 0x5EED_C0DE_0001;

pub fn stream(master_seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Derives a sub-seed for a named experiment stage, so that independent stages
/// of one experiment never share streams.
pub fn derive_seed(master_seed: u64, stage: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master_seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

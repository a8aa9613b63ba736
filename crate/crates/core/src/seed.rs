//! Deterministic seed derivation for independent random substreams.
//!
//! Every stochastic component (bootstrap threshold calibration, coefficient
//! resampling, simulation replications) draws from its own ChaCha stream whose
//! seed is derived from a master seed and a stream index. Runs are therefore
//! reproducible and shardable: replication `r` of a simulation can be redone
//! in isolation from `(master_seed, r)` alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 step; used only to decorrelate derived seeds.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed for substream `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// A ChaCha generator for substream `index` of `master`.
pub fn stream_rng(master: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, index))
}

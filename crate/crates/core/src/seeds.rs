//! Deterministic seed derivation for reproducible noise streams.
//!
//! Every stochastic draw in the crate comes from a child RNG derived from
//! `(master seed, iteration, component)`. Gradient components measured in
//! parallel therefore consume exactly the same noise as a sequential run,
//! and rerunning with the same master seed reproduces every signal
//! bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function; good avalanche behaviour for cheap key mixing.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold an ordered key into a single 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3; // arbitrary nonzero constant
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Child RNG for one measurement: keyed by master seed, iteration index and
/// a per-iteration component index (gradient component, repeat slot, ...).
pub fn child_rng(seed: u64, iteration: u64, component: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, iteration, component]))
}

/// Master seed for one trial of a multi-trial campaign.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    mix(&[master, 0x7472_6961_6c00_0000, trial]) // "trial" tag
}

//! Deterministic seed derivation.
//!
//! Every random decision in the crate (weight init, epoch shuffles, mask
//! subsets, data generation, search sampling) draws from a ChaCha8 stream
//! whose seed is derived from a master seed, a domain label, and an index.
//! Streams for distinct (domain, index) pairs are independent, so adding a
//! consumer in one place never perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step. Small, well-mixed, and stable across platforms.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, domain, index)`.
pub fn derive_seed(master: u64, domain: &str, index: u64) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for b in domain.as_bytes() {
        state ^= u64::from(*b);
        acc ^= splitmix64(&mut state);
    }
    state ^= index;
    acc ^ splitmix64(&mut state)
}

/// A seeded ChaCha8 generator for the given derivation path.
pub fn rng_from(master: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

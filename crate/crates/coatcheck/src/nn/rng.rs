//! Deterministic seed derivation.
//!
//! Every random decision in the crate flows from a single 64-bit seed through
//! a counter-based splitting scheme: a substream is identified by a string
//! domain tag plus an index, and two substreams never share state. This keeps
//! trials, batches, and workers reproducible regardless of evaluation order.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 step, the standard 64-bit finalizer used for seed expansion.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, domain, index)`.
///
/// The domain tag is folded in bytewise so distinct tags give unrelated
/// streams even for equal indices.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for &b in domain.as_bytes() {
        state ^= u64::from(b);
        acc ^= splitmix64(&mut state);
    }
    state ^= index;
    acc ^ splitmix64(&mut state)
}

/// RNG for a derived substream.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, domain, index))
}

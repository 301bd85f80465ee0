//! Seed derivation. Every command owns a scoped rng stream so two commands
//! sharing a `--seed` value never consume the same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Deterministic 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn scope_tag(scope: &str) -> u64 {
    // FNV-1a over the scope name.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in scope.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Rng for a (scope, seed) pair.
pub fn scoped(scope: &str, seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(seed ^ scope_tag(scope)))
}

/// Rng for the `index`-th independent job under a (scope, seed) pair.
pub fn scoped_indexed(scope: &str, seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(mix(seed ^ scope_tag(scope)).wrapping_add(index)))
}

//! Seeding discipline.
//!
//! Every random draw in the simulator derives from
//! `(master seed, purpose label, context words)` through a fixed mixing
//! function. There is no global RNG state, so any component can be replayed
//! in isolation and concurrent execution cannot perturb the draw sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes; stable across platforms.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the master seed, a purpose label and free context words
/// (cycle, round, node id, ...) into a child seed.
pub fn mix(master: u64, label: &str, context: &[u64]) -> u64 {
    let mut h = splitmix(master ^ hash_label(label));
    for &w in context {
        h = splitmix(h ^ w);
    }
    h
}

/// Deterministic stream RNG for a given `(master, label, context)` triple.
pub fn stream(master: u64, label: &str, context: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, label, context))
}

//! Deterministic seed derivation.
//!
//! Every stochastic component in the workbench (signal noise, weight init,
//! batch shuffling, block noise, perturbation noise) owns a seed derived
//! from a parent seed and a stream index, so whole runs replay bit-for-bit
//! from a single root seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixing of a 64-bit state.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a stream index.
pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Derive a child seed from `base` and two stream indices.
pub fn derive2(base: u64, a: u64, b: u64) -> u64 {
    derive(derive(base, a), b)
}

/// Seeded RNG used throughout; ChaCha8 keeps the stream identical across
/// platforms and runs.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

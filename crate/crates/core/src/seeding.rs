//! Deterministic derivation of per-stream RNG seeds from a master seed.
//!
//! Every parallel worker (trajectory, bin, quadrature ray) gets its own seed
//! derived from the master seed and a stream index, so results are identical
//! across runs and thread counts.

/// SplitMix64 output function applied to `state`.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for stream `index` from `master`.
///
/// Distinct indices give distinct streams; the map is a bijection of the
/// combined state so collisions across indices require a 64-bit hash collision.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

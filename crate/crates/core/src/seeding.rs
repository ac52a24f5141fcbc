//! Deterministic seed derivation for ensembles and parameter grids.
//!
//! Every stochastic task gets its seed as a pure function of a master seed and
//! its index, so results are reproducible bit-for-bit no matter how work is
//! split across threads or resumed runs.

/// Derive a child seed from `master` and a task index (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-level derivation for nested loops (e.g. grid cell then trial).
pub fn derive_seed2(master: u64, outer: u64, inner: u64) -> u64 {
    derive_seed(derive_seed(master, outer), inner)
}

//! Deterministic randomness. All stochastic operations take an explicit
//! 64-bit seed and run on a counter-based stream cipher generator, so the
//! same seed yields the same stream on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Build a generator from a bare seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed from a base seed and a stream index
/// (splitmix64 finalizer). Used to give each trial/round/purpose its own
/// stream without correlations.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = (0..8).map(|_| 0.0).collect();
        let mut r1 = rng_from_seed(42);
        let mut r2 = rng_from_seed(42);
        let s1: Vec<f64> = a.iter().map(|_| r1.random()).collect();
        let s2: Vec<f64> = a.iter().map(|_| r2.random()).collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }
}

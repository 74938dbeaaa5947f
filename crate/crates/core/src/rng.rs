//! Per-path random streams.
//!
//! Path `i` of a simulation keyed by `seed` always draws from ChaCha8 with
//! key `seed` and stream id `i`, so its shocks do not depend on how paths are
//! split into blocks or workers.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct PathRng(ChaCha8Rng);

impl PathRng {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        PathRng(rng)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a path of integer tags:
/// `s <- splitmix64(s ^ splitmix64(tag))` for each tag in order.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |s, &t| splitmix64(s ^ splitmix64(t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: [f64; 4] = core::array::from_fn({
            let mut r = PathRng::new(9, 3);
            move |_| r.normal()
        });
        let b: [f64; 4] = core::array::from_fn({
            let mut r = PathRng::new(9, 3);
            move |_| r.normal()
        });
        let mut c = PathRng::new(9, 4);
        assert_eq!(a, b);
        assert_ne!(a[0], c.normal());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
    }
}

//! Deterministic seed derivation and seeded table construction shared by the
//! stub encoders, the decoder stub, and parameter initialization.
//!
//! Everything routes through ChaCha8 streams keyed by FNV-mixed domain tags,
//! so identical (seed, domain) pairs reproduce bitwise-identical tables on
//! every platform and in every process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;

/// FNV-1a 64-bit over a byte string. Stable across processes, unlike the
/// standard library's randomized hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Mix a base seed with a domain tag into an independent stream seed.
pub fn derive_seed(base: u64, domain: &str) -> u64 {
    let mut h = fnv1a64(domain.as_bytes());
    h ^= base.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h
}

pub fn rng_for(base: u64, domain: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, domain))
}

/// Seeded Gaussian matrix with the given per-element scale.
pub fn seeded_matrix(base: u64, domain: &str, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut rng = rng_for(base, domain);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("seeded gaussian values are finite")
}

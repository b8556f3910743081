//! Seeded RNG streams and tensor initializers.
//!
//! Every stochastic component draws from a ChaCha stream derived from a
//! `(seed, tag)` pair via SHA-256, so independent subsystems never share or
//! perturb each other's randomness and whole runs replay bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// ChaCha stream keyed by SHA-256 of `(seed, tag)`.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal tensor.
pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product always agree here")
}

/// Uniform tensor in `(-limit, limit)`, the fan-in init used by all layers.
pub fn uniform(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product always agree here")
}

//! Seeded random streams.
//!
//! Every consumer of randomness (weight init, dropout masks, data shuffling,
//! noise perturbations) draws from its own named substream of one 64-bit
//! seed, so adding a consumer never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

/// Derive an independent generator for `name` under `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in the open interval (0, 1).
pub fn open01(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard normal draw by the Box–Muller transform (cosine branch).
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = open01(rng);
    let u2 = open01(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-uniform draw: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    use rand::Rng as _;
    let b = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-b..b))
}

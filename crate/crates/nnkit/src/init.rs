//! Seeded parameter initialisation. All draws are rounded to `f32` so
//! that parameters survive a single-precision checkpoint unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (self.rng.gen_range(-bound..=bound) as f32) as f64)
            .collect();
        Tensor::new(shape, data)
    }

    /// Glorot/Xavier uniform: bound = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    /// Recurrent matrices: uniform in ±1/sqrt(hidden).
    pub fn recurrent(&mut self, shape: &[usize], hidden: usize) -> Tensor {
        self.uniform(shape, 1.0 / (hidden.max(1) as f64).sqrt())
    }
}

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::dyn_shape;

/// Seeded weight initializer. Draw order is the row-major fill order of each
/// tensor, in the order the tensors are requested, so a fixed seed and a
/// fixed registration order reproduce identical weights.
pub struct Initializer {
    rng: ChaCha20Rng,
}

impl Initializer {
    pub fn from_seed(seed: u64) -> Self {
        Initializer {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// U(-limit, limit)
    pub fn uniform(&mut self, shape: &[usize], limit: f32) -> ArrayD<f32> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.random::<f32>() * 2.0 * limit - limit)
            .collect();
        ArrayD::from_shape_vec(dyn_shape(shape), data).unwrap()
    }

    /// Fan-in scaled uniform, the usual conv/linear default: U(±1/sqrt(fan_in)).
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        self.uniform(shape, 1.0 / (fan_in as f32).sqrt())
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> ArrayD<f32> {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        ArrayD::from_shape_vec(dyn_shape(shape), data).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(dyn_shape(shape))
    }

    pub fn ones(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::ones(dyn_shape(shape))
    }
}

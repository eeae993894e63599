//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of every projection and embedding.
pub const INIT_STD: f64 = 0.02;

/// Step sizes at initialization are log-uniform in this range.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Std of a unit normal truncated to [-2, 2].
const TRUNC2_STD: f64 = 0.879_569_1;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal truncated at two of its own standard deviations, rescaled so
    /// the resulting distribution has standard deviation `std`.
    pub fn trunc_normal<S: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<S> {
        let sigma = std / TRUNC2_STD;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break S::from_f64_lossy(z * sigma);
            }
        })
    }

    pub fn uniform<S: Scalar>(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::from_f64_lossy(self.rng.random_range(lo..hi)))
    }

    /// `ln(uniform(1, 16))` per head.
    pub fn a_log<S: Scalar>(&mut self, heads: usize) -> Tensor<S> {
        Tensor::from_fn(vec![heads], |_| S::from_f64_lossy(self.rng.random_range(1.0f64..16.0).ln()))
    }

    /// Inverse-softplus of log-uniform step sizes in `[DT_MIN, DT_MAX]`.
    pub fn dt_bias<S: Scalar>(&mut self, heads: usize) -> Tensor<S> {
        Tensor::from_fn(vec![heads], |_| {
            let u: f64 = self.rng.random_range(0.0..1.0);
            let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
            S::from_f64_lossy(dt + (-(-dt).exp_m1()).ln())
        })
    }
}

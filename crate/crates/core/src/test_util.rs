//! Deterministic random tensors for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub struct SplitMix(ChaCha8Rng);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }
}

/// Uniform values in `[-1, 1)`.
pub fn rand_tensor<T: Scalar>(rng: &mut SplitMix, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.uniform(-1.0, 1.0)))
}

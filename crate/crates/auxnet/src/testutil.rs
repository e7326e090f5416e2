//! Small helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

pub struct Rng64(pub ChaCha8Rng);

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Rng64(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }
}

/// Uniform values in [-1, 1).
pub fn rand_tensor<T: Element>(rng: &mut Rng64, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.uniform(-1.0, 1.0)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use nimbus_core::autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn noise_field(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((h, w), || StandardNormal.sample(&mut rng))
}

pub fn noise_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        e as f32
    })
}

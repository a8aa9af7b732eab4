//! Deterministic inputs shared by the benchmarks.

use rand::Rng;
use utg_core::kernel::Tensor;
use utg_core::rng;
use utg_core::CategoricalDist;

/// A random categorical over `v` outcomes.
pub fn random_categorical(v: usize, seed: u64) -> CategoricalDist {
    let mut r = rng::rng(seed);
    let w: Vec<f64> = (0..v).map(|_| r.random::<f64>().powi(3) + 1e-6).collect();
    let total: f64 = w.iter().sum();
    CategoricalDist::new(w.into_iter().map(|x| x / total).collect()).expect("normalized")
}

/// Tensor of the given shape with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

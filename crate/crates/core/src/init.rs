use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsam_autodiff::Tensor;

/// Glorot/Xavier uniform for a `fan_in × fan_out` matrix.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi) as f32).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub(crate) fn constant(rows: usize, cols: usize, v: f32) -> Tensor {
    Tensor::matrix(rows, cols, vec![v; rows * cols]).expect("positive dims")
}

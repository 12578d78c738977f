//! Parameter initializers. All draw from a caller-owned seeded RNG so that
//! registration order fully determines the initial weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Tensor};

/// He-normal for convolutions feeding a rectifier.
pub fn he_normal<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Glorot-uniform for `[out, in]` matrices.
pub fn xavier_uniform<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let fan_out = shape[0];
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

pub fn normal<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, sd).expect("finite sd");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

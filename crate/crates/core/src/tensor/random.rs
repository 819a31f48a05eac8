//! Seeded tensor initialization helpers.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Normal(0, std) tensor. Values are drawn in `f64` and cast, so the
/// draw sequence is identical for both element types.
pub fn normal_tensor<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha20Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("std must be finite");
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("normal draws are finite")
}

/// Uniform tensor over [lo, hi).
pub fn uniform_tensor<T: Scalar>(
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha20Rng,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new(lo, hi);
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.sample(dist))).collect();
    Tensor::new(shape, data).expect("uniform draws are finite")
}

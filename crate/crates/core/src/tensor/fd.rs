//! Central finite-difference gradient oracle.
//!
//! Stays independent of the tape: it only re-evaluates the supplied
//! closure, so it can check `backward` without sharing any code path
//! with it.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Central-difference gradient estimate of a deterministic scalar
/// function: `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
pub fn finite_difference_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let mut grad = vec![T::zero(); x.numel()];
    let two_h = h + h;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / two_h;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error between two gradients with a small absolute floor,
/// used by the gradient-check tests.
pub fn max_rel_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

//! Central-difference gradients: the test oracle for [`Tape::backward`](super::Tape::backward).

use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, eps: f64) -> Tensor<T> {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + T::from_f64(eps);
        let up = f(&probe);
        probe.data_mut()[i] = orig - T::from_f64(eps);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64((up - down) / (2.0 * eps)));
    }
    Tensor::from_vec(x.dims(), grad).expect("same shape as x")
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Largest [`relative_error`] over corresponding elements.
pub fn max_relative_error<A: Real, B: Real>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "max_relative_error shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| relative_error(x.to_f64(), y.to_f64())).fold(0.0, f64::max)
}

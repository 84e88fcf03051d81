//! Central finite differences, the oracle every backward rule is checked against.

use super::Tensor;
use crate::error::{arg_err, Result};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `at`.
pub fn finite_diff_gradient<F>(f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(arg_err("finite_diff_gradient", format!("step must be > 0, got {step}")));
    }
    let base = at.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let up = f(&Tensor::new(at.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - step;
        let down = f(&Tensor::new(at.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// Element-wise error used by the gradient checks: `|a − b| / max(|a|, |b|, floor / rel)`.
///
/// A value `≤ rel` means the element is within relative error `rel` or
/// within absolute error `floor`.
pub fn scaled_error(a: f64, b: f64, rel: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor / rel)
}

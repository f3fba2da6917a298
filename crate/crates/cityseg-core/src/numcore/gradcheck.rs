//! Central-difference gradient oracle.
//!
//! Every backward pass in this repository is certified against this oracle:
//! perturb each input coordinate by ±eps, difference the scalar output, and
//! compare to the analytic gradient with a relative-error metric.

use crate::error::Result;
use crate::numcore::Tensor;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `x`.
pub fn central_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe)?;
        probe[i] = x[i] - eps;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compare the analytic gradient of a scalar map against central
/// differences; returns the max relative error over all coordinates of `x`.
///
/// `value` evaluates the map; `analytic` returns the same-shape gradient.
pub fn finite_diff_check<V, G>(value: V, analytic: G, x: &Tensor, eps: f64) -> Result<f64>
where
    V: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    let grad = analytic(x)?;
    assert_eq!(grad.shape(), x.shape(), "analytic gradient shape mismatch");
    let shape = x.shape().to_vec();
    let numeric = central_diff_grad(
        |flat| value(&Tensor::from_parts(shape.clone(), flat.to_vec())),
        x.data(),
        eps,
    )?;
    Ok(max_rel_err(grad.data(), &numeric))
}

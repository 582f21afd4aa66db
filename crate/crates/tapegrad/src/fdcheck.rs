//! Central finite differences for gradient verification.
//!
//! These helpers only evaluate the forward path, so they stay independent of
//! the backward rules they are used to check.

/// Central-difference gradient of a scalar function at `x`.
///
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)`
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst relative error between an analytic gradient and a reference,
/// normalized by the largest reference magnitude. Falls back to absolute
/// error when the reference is nearly zero everywhere.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |acc, (&a, &r)| acc.max((a - r).abs() / scale))
}

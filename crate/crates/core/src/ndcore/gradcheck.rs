//! Central finite differences, used as the independent oracle for every
//! hand-derived gradient in the crate.

/// Estimates `∂f/∂p_i ≈ (f(p + ε e_i) − f(p − ε e_i)) / 2ε` for every coordinate.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + epsilon;
        let plus = loss_fn(&p);
        p[i] = orig - epsilon;
        let minus = loss_fn(&p);
        p[i] = orig;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    grad
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps coordinates whose true
/// gradient is zero from dividing by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

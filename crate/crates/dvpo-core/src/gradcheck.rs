//! Central finite-difference gradient checking.
//!
//! Compares analytic gradients against numeric ones. Lives in the library
//! rather than in a test module because the integration tests of downstream
//! crates drive it too.

/// Numeric gradient of `f` at `x` via central differences with step `h`.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let above = f(&probe);
        probe[i] = x[i] - h;
        let below = f(&probe);
        probe[i] = x[i];
        grad[i] = (above - below) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients, with the
/// denominator floored so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

//! Central finite differences for verifying analytic gradients.

/// Floor added to the denominator of the relative error so that coordinates
/// where both gradients vanish do not divide by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-10;

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn central_differences<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest `|analytic - numeric| / (|analytic| + |numeric| + floor)` over all coordinates.
pub fn finite_diff_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let numeric = central_differences(f, point, step);
    max_relative_error(analytic, &numeric)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

//! Central finite-difference verification of analytic gradients.

/// Largest coordinate-wise relative error between the analytic gradient of
/// `f` at `point` and central differences with the given `step`.
///
/// `f` returns the value and the analytic gradient. The error at each
/// coordinate is `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match point");
    let fd = central_differences(|x| f(x).0, point, step);
    max_relative_error(&analytic, &fd)
}

pub fn central_differences<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

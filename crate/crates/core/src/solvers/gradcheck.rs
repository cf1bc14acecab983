//! Finite-difference gradient checks for objective callbacks.

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every
/// coordinate.
pub fn central_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}

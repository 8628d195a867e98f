//! Central finite differences for verifying analytic gradients.

use alloc::vec::Vec;

/// `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            probe[i] = point[i] + step;
            let plus = f(&probe);
            probe[i] = point[i] - step;
            let minus = f(&probe);
            probe[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are exactly zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let diff = libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    let scale = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>())
        .max(libm::sqrt(b.iter().map(|x| x * x).sum::<f64>()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

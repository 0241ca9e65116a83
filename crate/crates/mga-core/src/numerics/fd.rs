//! Central finite differences, the independent oracle every analytic
//! gradient in this crate is checked against. Run at `f64`; step sizes that
//! work there are unreliable at `f32`.

use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient estimate of a scalar function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate, with an absolute floor so near-zero coordinates do not blow up
/// the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-6);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

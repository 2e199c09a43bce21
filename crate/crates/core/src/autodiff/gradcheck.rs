use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { context: format!("finite difference at coordinate {i}") });
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`: relative error that degrades to an
/// absolute one for components smaller than `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y, floor)).fold(0.0, f64::max)
}

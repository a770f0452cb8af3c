//! Central finite differences, used as an independent oracle for reverse-mode gradients.

use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = loss_fn(&x)?;
        x[i] = orig - eps;
        let minus = loss_fn(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while differencing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dividing by round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x| Ok(x[0] * x[0]), &[3.0], DEFAULT_FD_EPS).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_gradient(|_| Ok(4.2), &[1.0, 2.0, 3.0], DEFAULT_FD_EPS).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn linear_sum() {
        let g = finite_diff_gradient(|x| Ok(x.iter().sum()), &[0.1, -5.0, 7.0, 2.0], DEFAULT_FD_EPS)
            .unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_loss_propagates() {
        let err = finite_diff_gradient(|x| Ok(1.0 / (x[0] - 1e-6)), &[0.0], 1e-6).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(finite_diff_gradient(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }
}

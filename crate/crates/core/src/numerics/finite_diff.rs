//! Central finite differences for gradient verification.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Scale below which gradients are compared in absolute terms.
///
/// Central differences at `h = 1e-5` carry round-off near `1e-10`, so a
/// gradient that is exactly zero (a bias in front of a mean-subtracting
/// layer, say) cannot be matched to any relative tolerance.
pub const GRADIENT_SCALE_FLOOR: f64 = 1e-3;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let plus = f(&point);
        point[i] = x[i] - h;
        let minus = f(&point);
        point[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidInput(alloc::format!(
                "objective is non-finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero gradients from turning round-off into a large
/// relative error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use alloc::vec;

    #[test]
    fn square_and_sigmoid() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let sig = |x: &[f64]| 1.0 / (1.0 + libm::exp(-x[0]));
        let g = finite_diff_gradient(sig, &[0.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form_matches_analytic() {
        let mut rng = SeededRng::new(1);
        let n = 5;
        let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let f = |v: &[f64]| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += v[i] * a[i * n + j] * v[j];
                }
            }
            s
        };
        let g = finite_diff_gradient(f, &x, DEFAULT_STEP).unwrap();
        for i in 0..n {
            let exact: f64 = (0..n).map(|j| (a[i * n + j] + a[j * n + i]) * x[j]).sum();
            assert!(relative_error(g[i], exact, 1e-8) < 1e-6, "{} vs {exact}", g[i]);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_diff_gradient(|x| 1.0 / x[0], &[0.0], 0.0);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let _ = vec![0];
    }
}

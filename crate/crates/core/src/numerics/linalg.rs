//! Covariance and inverse matrix square roots.
//!
//! Two routes to `Σ^{-1/2}` are provided. [`exact_inv_sqrt`] goes through a
//! cyclic Jacobi eigendecomposition and serves as the reference; the
//! Newton–Schulz route only uses matrix products, so it can be differentiated
//! step by step (see [`NewtonSchulzTrace::backward`]).

use alloc::vec::Vec;

use super::matrix::Matrix;
use crate::error::{contract, Error, Result};

/// Ridge added to the diagonal of batch covariances unless configured otherwise.
pub const DEFAULT_RIDGE: f64 = 1e-5;
/// Newton–Schulz iterations unless configured otherwise.
pub const DEFAULT_NS_ITERATIONS: usize = 5;

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Column mean and `(1/n)·(X−μ)ᵀ(X−μ) + ridge·I`.
///
/// The result is symmetric bit-for-bit: only the upper triangle is
/// accumulated and then mirrored.
pub fn covariance(x: &Matrix, ridge: f64) -> Result<(Vec<f64>, Matrix)> {
    if x.rows() < 2 {
        return Err(Error::DegenerateBatch { rows: x.rows() });
    }
    x.check_finite("covariance input")?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidInput(alloc::format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let mean = x.column_mean();
    let centered = x.sub_row_vector(&mean)?;
    let d = x.cols();
    let n = x.rows() as f64;
    let mut sigma = Matrix::zeros(d, d);
    for r in centered.iter_rows() {
        for i in 0..d {
            let ri = r[i];
            for j in i..d {
                sigma[(i, j)] += ri * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[(i, j)] / n;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
        sigma[(i, i)] += ridge;
    }
    Ok((mean, sigma))
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi sweeps until the off-diagonal norm drops below
/// `1e-12·‖A‖_F` (or 100 sweeps).
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    contract!(a.is_square(), "eigendecomposition of a {}x{} matrix", a.rows(), a.cols());
    a.check_finite("eigendecomposition input")?;
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let threshold = JACOBI_TOLERANCE * if scale > 0.0 { scale } else { 1.0 };

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                // signum(+0.0) = 1, so theta = 0 gives t = 1 (a 45 degree rotation)
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }
    let values = (0..n).map(|i| m[(i, i)]).collect();
    Ok(SymmetricEigen { values, vectors: v })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    libm::sqrt(s)
}

// Applies J^T M J with J the (p, q) Givens rotation, and accumulates V <- V J.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Symmetric `Σ^{-1/2}` from the eigendecomposition.
pub fn exact_inv_sqrt(sigma: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eigen(sigma)?;
    if let Some(&bad) = eig.values.iter().find(|&&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: bad });
    }
    let n = sigma.rows();
    let inv_sqrt: Vec<f64> = eig.values.iter().map(|&l| 1.0 / libm::sqrt(l)).collect();
    let v = &eig.vectors;
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| v[(i, k)] * inv_sqrt[k] * v[(j, k)]).sum();
            w[(i, j)] = s;
            w[(j, i)] = s;
        }
    }
    Ok(w)
}

/// Everything the Newton–Schulz backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct NewtonSchulzTrace {
    trace: f64,
    normalized: Matrix,
    /// `P_0 .. P_T`.
    iterates: Vec<Matrix>,
    /// `P_k Σ_N` and `P_k P_k Σ_N` for each step, reused by the backward pass.
    partials: Vec<(Matrix, Matrix)>,
    sigma: Matrix,
}

impl NewtonSchulzTrace {
    /// Computes `W = P_T / √tr` with `Σ_N = Σ/tr`, `P_0 = I` and
    /// `P_{k+1} = ½(3P_k − P_k³Σ_N)`.
    pub fn forward(sigma: &Matrix, iterations: usize) -> Result<(Matrix, Self)> {
        contract!(sigma.is_square(), "Newton–Schulz on a {}x{} matrix", sigma.rows(), sigma.cols());
        sigma.check_finite("Newton–Schulz input")?;
        let trace = sigma.trace();
        if !(trace > 0.0) {
            return Err(Error::InvalidInput(alloc::format!(
                "Newton–Schulz needs a positive trace, got {trace}"
            )));
        }
        let n = sigma.rows();
        let normalized = sigma.scale(1.0 / trace);
        let mut iterates = Vec::with_capacity(iterations + 1);
        let mut partials = Vec::with_capacity(iterations);
        let mut p = Matrix::identity(n);
        for _ in 0..iterations {
            let ps = p.matmul(&normalized)?;
            let pps = p.matmul(&ps)?;
            let ppps = p.matmul(&pps)?;
            let next = Matrix::from_fn(n, n, |i, j| 0.5 * (3.0 * p[(i, j)] - ppps[(i, j)]));
            iterates.push(p);
            partials.push((ps, pps));
            p = next;
        }
        let w = p.scale(1.0 / libm::sqrt(trace));
        iterates.push(p);
        Ok((w, Self { trace, normalized, iterates, partials, sigma: sigma.clone() }))
    }

    /// Gradient with respect to `Σ` given the gradient with respect to `W`.
    /// Differentiates every unrolled step, including the trace normalization.
    pub fn backward(&self, grad_w: &Matrix) -> Result<Matrix> {
        let n = self.sigma.rows();
        let sqrt_tr = libm::sqrt(self.trace);
        let last = self.iterates.last().expect("at least P_0");
        let mut grad_p = grad_w.scale(1.0 / sqrt_tr);
        // d(P_T / sqrt(tr)) / d tr
        let mut grad_tr = -0.5 * grad_w.frobenius_dot(last) / (self.trace * sqrt_tr);
        let mut grad_sn = Matrix::zeros(n, n);

        for k in (0..self.partials.len()).rev() {
            let p = &self.iterates[k];
            let (ps, pps) = &self.partials[k];
            // P_{k+1} = 1.5 P - 0.5 P (P (P S))
            let grad_a = grad_p.scale(-0.5);
            let mut grad_prev = grad_p.scale(1.5);
            // A = P * PPS
            grad_prev.add_assign(&grad_a.matmul_t(pps)?)?;
            let grad_pps = p.t_matmul(&grad_a)?;
            // PPS = P * PS
            grad_prev.add_assign(&grad_pps.matmul_t(ps)?)?;
            let grad_ps = p.t_matmul(&grad_pps)?;
            // PS = P * S
            grad_prev.add_assign(&grad_ps.matmul_t(&self.normalized)?)?;
            grad_sn.add_assign(&p.t_matmul(&grad_ps)?)?;
            grad_p = grad_prev;
        }

        // S = Σ / tr
        let mut grad_sigma = grad_sn.scale(1.0 / self.trace);
        grad_tr -= grad_sn.frobenius_dot(&self.sigma) / (self.trace * self.trace);
        for i in 0..n {
            grad_sigma[(i, i)] += grad_tr;
        }
        Ok(grad_sigma)
    }
}

/// Iterative `Σ^{-1/2}` with trace normalization and `iterations` steps.
pub fn newton_schulz_inv_sqrt(sigma: &Matrix, iterations: usize) -> Result<Matrix> {
    NewtonSchulzTrace::forward(sigma, iterations).map(|(w, _)| w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;
    use alloc::vec;

    fn random_spd(rng: &mut SeededRng, d: usize, cond: f64) -> Matrix {
        let q = random_orthogonal(rng, d);
        let eig: Vec<f64> = (0..d)
            .map(|i| if d == 1 { 1.0 } else { libm::pow(cond, i as f64 / (d - 1) as f64) })
            .collect();
        let qd = Matrix::from_fn(d, d, |i, j| q[(i, j)] * eig[j]);
        let s = qd.matmul_t(&q).unwrap();
        Matrix::from_fn(d, d, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]))
    }

    // Gram-Schmidt on a Gaussian matrix.
    fn random_orthogonal(rng: &mut SeededRng, d: usize) -> Matrix {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for c in &cols {
                let p = crate::numerics::dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
            let nv = crate::numerics::norm(&v);
            if nv > 1e-8 {
                v.iter_mut().for_each(|x| *x /= nv);
                cols.push(v);
            }
        }
        Matrix::from_fn(d, d, |i, j| cols[j][i])
    }

    fn whitening_residual(w: &Matrix, sigma: &Matrix) -> f64 {
        let wsw = w.matmul(sigma).unwrap().matmul(w).unwrap();
        wsw.sub(&Matrix::identity(sigma.rows())).unwrap().frobenius_norm()
    }

    #[test]
    fn covariance_hand_examples() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let (_, s) = covariance(&x, 1e-5).unwrap();
        assert_eq!(s, Matrix::identity(2).scale(1e-5));

        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let (mu, s) = covariance(&x, 0.0).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(s, Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
    }

    #[test]
    fn covariance_errors() {
        let one = Matrix::zeros(1, 3);
        assert_eq!(covariance(&one, 0.0), Err(Error::DegenerateBatch { rows: 1 }));
        let mut bad = Matrix::zeros(3, 2);
        bad[(1, 1)] = f64::NAN;
        assert!(matches!(covariance(&bad, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut rng = SeededRng::new(11);
        let x = Matrix::from_fn(256, 16, |_, j| rng.normal() * (1.0 + j as f64) + j as f64);
        let (mu, s) = covariance(&x, 0.0).unwrap();
        // two-pass oracle: explicit mean, then explicit sum of centred products
        for j in 0..16 {
            let m: f64 = (0..256).map(|i| x[(i, j)]).sum::<f64>() / 256.0;
            assert!((m - mu[j]).abs() <= 1e-12 * (1.0 + m.abs()));
        }
        for a in 0..16 {
            for b in 0..16 {
                let ma: f64 = (0..256).map(|i| x[(i, a)]).sum::<f64>() / 256.0;
                let mb: f64 = (0..256).map(|i| x[(i, b)]).sum::<f64>() / 256.0;
                let c: f64 = (0..256).map(|i| (x[(i, a)] - ma) * (x[(i, b)] - mb)).sum::<f64>() / 256.0;
                assert!((c - s[(a, b)]).abs() <= 1e-12 * (1.0 + c.abs()), "({a},{b}) {c} vs {}", s[(a, b)]);
                assert_eq!(s[(a, b)].to_bits(), s[(b, a)].to_bits());
            }
        }
    }

    #[test]
    fn covariance_is_psd_up_to_ridge() {
        let mut rng = SeededRng::new(5);
        for trial in 0..10 {
            let n = 3 + trial;
            let x = Matrix::from_fn(n, 6, |_, _| rng.normal());
            let (_, raw) = covariance(&x, 0.0).unwrap();
            let min_raw = symmetric_eigen(&raw).unwrap().values.into_iter().fold(f64::INFINITY, f64::min);
            assert!(min_raw >= -1e-10, "{min_raw}");
            let (_, ridged) = covariance(&x, 1e-3).unwrap();
            let min_ridged =
                symmetric_eigen(&ridged).unwrap().values.into_iter().fold(f64::INFINITY, f64::min);
            assert!(min_ridged >= 1e-3 * 0.99, "{min_ridged}");
        }
    }

    #[test]
    fn exact_inv_sqrt_analytic_cases() {
        assert!(exact_inv_sqrt(&Matrix::identity(3)).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-15);
        let w = exact_inv_sqrt(&Matrix::from_diag(&[4.0, 1.0])).unwrap();
        assert!(w.max_abs_diff(&Matrix::from_diag(&[0.5, 1.0])) < 1e-15);
    }

    #[test]
    fn exact_inv_sqrt_random_spd() {
        let mut rng = SeededRng::new(3);
        for _ in 0..5 {
            let s = random_spd(&mut rng, 8, 50.0);
            let w = exact_inv_sqrt(&s).unwrap();
            assert!(whitening_residual(&w, &s) <= 1e-10 * 8.0);
            assert!(w.max_abs_diff(&w.transpose()) <= 1e-12);
        }
    }

    #[test]
    fn exact_inv_sqrt_ill_conditioned() {
        let mut rng = SeededRng::new(4);
        for _ in 0..5 {
            let s = random_spd(&mut rng, 12, 1e4);
            let w = exact_inv_sqrt(&s).unwrap();
            let wtws = w.t_matmul(&w).unwrap().matmul(&s).unwrap();
            assert!(wtws.sub(&Matrix::identity(12)).unwrap().frobenius_norm() <= 1e-9);
        }
    }

    #[test]
    fn exact_inv_sqrt_rejects_indefinite() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(exact_inv_sqrt(&m), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn newton_schulz_scalar_and_identity() {
        for t in 0..8 {
            let w = newton_schulz_inv_sqrt(&Matrix::from_diag(&[4.0]), t).unwrap();
            assert_eq!(w[(0, 0)], 0.5);
            let w = newton_schulz_inv_sqrt(&Matrix::identity(1), t).unwrap();
            assert_eq!(w, Matrix::identity(1));
        }
    }

    #[test]
    fn newton_schulz_close_to_exact_on_diag() {
        let s = Matrix::from_diag(&[4.0, 1.0]);
        let ns = newton_schulz_inv_sqrt(&s, 5).unwrap();
        let exact = exact_inv_sqrt(&s).unwrap();
        assert!(ns.max_abs_diff(&exact) <= 1e-2);
    }

    #[test]
    fn newton_schulz_rejects_nonpositive_trace() {
        let m = Matrix::from_diag(&[-1.0, 0.5]);
        assert!(matches!(newton_schulz_inv_sqrt(&m, 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn newton_schulz_error_non_increasing() {
        let mut rng = SeededRng::new(9);
        for _ in 0..10 {
            let s = random_spd(&mut rng, 6, 100.0);
            let mut prev = f64::INFINITY;
            for t in 1..=8 {
                let e = whitening_residual(&newton_schulz_inv_sqrt(&s, t).unwrap(), &s);
                assert!(e <= prev + 1e-12, "T={t}: {e} > {prev}");
                prev = e;
            }
        }
    }

    #[test]
    fn newton_schulz_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let s = random_spd(&mut rng, 4, 10.0);
        let g = Matrix::from_fn(4, 4, |_, _| rng.normal());
        let (_, trace) = NewtonSchulzTrace::forward(&s, 4).unwrap();
        let analytic = trace.backward(&g).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut plus = s.clone();
                plus[(i, j)] += h;
                let mut minus = s.clone();
                minus[(i, j)] -= h;
                let fp = newton_schulz_inv_sqrt(&plus, 4).unwrap().frobenius_dot(&g);
                let fm = newton_schulz_inv_sqrt(&minus, 4).unwrap().frobenius_dot(&g);
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[(i, j)];
                assert!((fd - a).abs() <= 1e-6 * a.abs().max(1.0), "({i},{j}) {a} vs {fd}");
            }
        }
    }
}

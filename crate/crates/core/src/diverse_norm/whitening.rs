//! Batch whitening `ψ(Z) = W(Z − μ)` with `WᵀW = Σ⁻¹`.

use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::{covariance, exact_inv_sqrt, Matrix, NewtonSchulzTrace, DEFAULT_NS_ITERATIONS, DEFAULT_RIDGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhiteningMethod {
    /// Symmetric eigendecomposition; `W` and `μ` are constants for the backward pass.
    Exact,
    /// Unrolled Newton–Schulz; the backward pass differentiates through every step.
    NewtonSchulz,
}

impl WhiteningMethod {
    pub fn name(self) -> &'static str {
        match self {
            WhiteningMethod::Exact => "exact",
            WhiteningMethod::NewtonSchulz => "newton_schulz",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(WhiteningMethod::Exact),
            "newton_schulz" => Some(WhiteningMethod::NewtonSchulz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhiteningConfig {
    pub method: WhiteningMethod,
    pub iterations: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for WhiteningConfig {
    fn default() -> Self {
        Self {
            method: WhiteningMethod::NewtonSchulz,
            iterations: DEFAULT_NS_ITERATIONS,
            eps: DEFAULT_RIDGE,
            momentum: 0.1,
        }
    }
}

/// Whitening layer state: configuration plus running mean and covariance.
///
/// `running_cov` already contains the `eps` ridge because it averages ridged
/// batch covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningState {
    pub running_mean: Vec<f64>,
    pub running_cov: Matrix,
    pub momentum: f64,
    pub eps: f64,
    pub iterations: usize,
    pub method: WhiteningMethod,
    pub mode: Mode,
    /// Number of running-statistics updates so far.
    pub updates: u64,
}

/// Mean and ridged covariance of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

#[derive(Debug, Clone)]
pub enum WhitenCache {
    Unrolled { centered: Matrix, w: Matrix, ns: NewtonSchulzTrace },
    Constant { w: Matrix },
}

/// A frozen whitening transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub mean: Vec<f64>,
    pub w: Matrix,
}

impl Whitener {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.sub_row_vector(&self.mean)?.matmul_t(&self.w)
    }
}

impl WhiteningState {
    pub fn new(dim: usize, config: WhiteningConfig) -> Self {
        Self {
            running_mean: alloc::vec![0.0; dim],
            running_cov: Matrix::identity(dim),
            momentum: config.momentum,
            eps: config.eps,
            iterations: config.iterations,
            method: config.method,
            mode: Mode::Train,
            updates: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    pub fn config(&self) -> WhiteningConfig {
        WhiteningConfig { method: self.method, iterations: self.iterations, eps: self.eps, momentum: self.momentum }
    }

    fn inv_sqrt(&self, sigma: &Matrix) -> Result<Matrix> {
        match self.method {
            WhiteningMethod::Exact => exact_inv_sqrt(sigma),
            WhiteningMethod::NewtonSchulz => NewtonSchulzTrace::forward(sigma, self.iterations).map(|(w, _)| w),
        }
    }

    /// Whitens with the statistics of `x` itself. Does not touch the running
    /// statistics; hand the returned [`BatchStats`] to [`Self::update_running`].
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, WhitenCache, BatchStats)> {
        contract!(x.cols() == self.dim(), "whitening {} columns with a {}-dim layer", x.cols(), self.dim());
        let (mean, cov) = covariance(x, self.eps)?;
        let centered = x.sub_row_vector(&mean)?;
        let (psi, cache) = match self.method {
            WhiteningMethod::Exact => {
                let w = exact_inv_sqrt(&cov)?;
                (centered.matmul_t(&w)?, WhitenCache::Constant { w })
            }
            WhiteningMethod::NewtonSchulz => {
                let (w, ns) = NewtonSchulzTrace::forward(&cov, self.iterations)?;
                (centered.matmul_t(&w)?, WhitenCache::Unrolled { centered, w, ns })
            }
        };
        Ok((psi, cache, BatchStats { mean, cov }))
    }

    /// `r ← (1 − momentum)·r + momentum·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_cov.as_mut_slice().iter_mut().zip(stats.cov.as_slice()) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates += 1;
    }

    /// Transform built from the running statistics.
    pub fn eval_whitener(&self) -> Result<Whitener> {
        if self.updates == 0 {
            return Err(Error::UninitializedStats);
        }
        Ok(Whitener { mean: self.running_mean.clone(), w: self.inv_sqrt(&self.running_cov)? })
    }

    /// Mode-dependent whitening. Train mode uses and then folds in the batch
    /// statistics; eval mode uses the running statistics and changes nothing.
    pub fn whiten(&mut self, x: &Matrix) -> Result<(Matrix, WhitenCache)> {
        match self.mode {
            Mode::Train => {
                let (psi, cache, stats) = self.forward_batch(x)?;
                self.update_running(&stats);
                Ok((psi, cache))
            }
            Mode::Eval => {
                let whitener = self.eval_whitener()?;
                let psi = whitener.apply(x)?;
                Ok((psi, WhitenCache::Constant { w: whitener.w }))
            }
        }
    }

    /// Gradient w.r.t. the layer input.
    pub fn backward(cache: &WhitenCache, grad_psi: &Matrix) -> Result<Matrix> {
        match cache {
            WhitenCache::Constant { w } => grad_psi.matmul(w),
            WhitenCache::Unrolled { centered, w, ns } => {
                let n = centered.rows() as f64;
                // psi = Xc W^T
                let mut grad_centered = grad_psi.matmul(w)?;
                let grad_w = grad_psi.t_matmul(centered)?;
                let grad_sigma = ns.backward(&grad_w)?;
                // sigma = Xc^T Xc / n + eps I
                let sym = grad_sigma.add(&grad_sigma.transpose())?;
                grad_centered.add_assign(&centered.matmul(&sym)?.scale(1.0 / n))?;
                // Xc = X - mean(X)
                let col_mean = grad_centered.column_mean();
                grad_centered.sub_row_vector(&col_mean)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error, SeededRng, DEFAULT_STEP, GRADIENT_SCALE_FLOOR};

    fn output_cov_error(psi: &Matrix) -> f64 {
        let (_, c) = covariance(psi, 0.0).unwrap();
        c.sub(&Matrix::identity(psi.cols())).unwrap().frobenius_norm()
    }

    fn diag_batch(rng: &mut SeededRng, n: usize) -> Matrix {
        Matrix::from_fn(n, 2, |_, j| rng.normal() * if j == 0 { 2.0 } else { 1.0 })
    }

    #[test]
    fn scalar_standardization() {
        // mean 5, variance 4 under the 1/n convention
        let x = Matrix::from_rows(&[[3.0], [7.0], [3.0], [7.0]]).unwrap();
        for method in [WhiteningMethod::Exact, WhiteningMethod::NewtonSchulz] {
            let cfg = WhiteningConfig { method, eps: 0.0, ..WhiteningConfig::default() };
            let (psi, _, _) = WhiteningState::new(1, cfg).forward_batch(&x).unwrap();
            let expect = [-1.0, 1.0, -1.0, 1.0];
            for (p, e) in psi.as_slice().iter().zip(expect) {
                assert!((p - e).abs() < 1e-12, "{method:?}: {p} vs {e}");
            }
        }
    }

    #[test]
    fn diag_covariance_batch_is_whitened() {
        let mut rng = SeededRng::new(8);
        let x = diag_batch(&mut rng, 256);
        let exact = WhiteningState::new(2, WhiteningConfig { method: WhiteningMethod::Exact, ..Default::default() });
        let (psi, _, _) = exact.forward_batch(&x).unwrap();
        assert!(output_cov_error(&psi) <= 1e-3);
        let ns = WhiteningState::new(2, WhiteningConfig::default());
        let (psi, _, _) = ns.forward_batch(&x).unwrap();
        assert!(output_cov_error(&psi) <= 5e-2);
    }

    #[test]
    fn train_batch_of_one_is_degenerate() {
        let mut st = WhiteningState::new(3, WhiteningConfig::default());
        assert_eq!(st.whiten(&Matrix::zeros(1, 3)).unwrap_err(), Error::DegenerateBatch { rows: 1 });
    }

    #[test]
    fn eval_before_training_fails() {
        let mut st = WhiteningState::new(2, WhiteningConfig::default());
        st.mode = Mode::Eval;
        assert_eq!(st.whiten(&Matrix::zeros(4, 2)).unwrap_err(), Error::UninitializedStats);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = SeededRng::new(1);
        let mut st = WhiteningState::new(2, WhiteningConfig::default());
        let x = diag_batch(&mut rng, 32);
        let (mean, cov) = covariance(&x, st.eps).unwrap();
        st.whiten(&x).unwrap();
        assert_eq!(st.updates, 1);
        for j in 0..2 {
            assert_eq!(st.running_mean[j], 0.1 * mean[j]);
        }
        let expect = Matrix::identity(2).scale(0.9).add(&cov.scale(0.1)).unwrap();
        assert!(st.running_cov.max_abs_diff(&expect) < 1e-15);

        // eval leaves the running statistics alone
        let before = st.clone();
        st.mode = Mode::Eval;
        st.whiten(&x).unwrap();
        assert_eq!(st.running_cov, before.running_cov);
        assert_eq!(st.updates, 1);
    }

    #[test]
    fn unrolled_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(12);
        let x = Matrix::from_fn(10, 4, |_, j| rng.normal() * (1.0 + j as f64 * 0.5));
        let g = Matrix::from_fn(10, 4, |_, _| rng.normal());
        let st = WhiteningState::new(4, WhiteningConfig::default());
        let (_, cache, _) = st.forward_batch(&x).unwrap();
        let analytic = WhiteningState::backward(&cache, &g).unwrap();
        let fd = finite_diff_gradient(
            |v| {
                let xm = Matrix::from_vec(10, 4, v.to_vec()).unwrap();
                st.forward_batch(&xm).unwrap().0.frobenius_dot(&g)
            },
            x.as_slice(),
            DEFAULT_STEP,
        )
        .unwrap();
        for (a, n) in analytic.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *n, GRADIENT_SCALE_FLOOR) <= 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn exact_backward_treats_statistics_as_constants() {
        let mut rng = SeededRng::new(13);
        let x = Matrix::from_fn(12, 3, |_, _| rng.normal());
        let g = Matrix::from_fn(12, 3, |_, _| rng.normal());
        let st = WhiteningState::new(3, WhiteningConfig { method: WhiteningMethod::Exact, ..Default::default() });
        let (_, cache, stats) = st.forward_batch(&x).unwrap();
        let analytic = WhiteningState::backward(&cache, &g).unwrap();
        let frozen = Whitener { mean: stats.mean, w: exact_inv_sqrt(&stats.cov).unwrap() };
        let fd = finite_diff_gradient(
            |v| frozen.apply(&Matrix::from_vec(12, 3, v.to_vec()).unwrap()).unwrap().frobenius_dot(&g),
            x.as_slice(),
            DEFAULT_STEP,
        )
        .unwrap();
        for (a, n) in analytic.as_slice().iter().zip(&fd) {
            assert!(relative_error(*a, *n, GRADIENT_SCALE_FLOOR) <= 1e-6);
        }
    }
}

//! Channel-attention gate `ω = σ(W·GAP(ψ))` and the identity/clothing split.

use crate::diffnet::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, sigmoid_backward, Linear,
    ParamTensor, SpatialBatch,
};
use crate::error::{contract, Result};
use crate::numerics::{Matrix, SeededRng};
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateVariant {
    /// One `d → d` fully connected map.
    Single,
    /// Squeeze-and-excitation style `d → d/ratio → d` with a ReLU in between.
    Reduced { ratio: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    Single { fc: Linear },
    Reduced { fc1: Linear, fc2: Linear },
}

#[derive(Debug, Clone)]
pub struct GateCache {
    pooled: Matrix,
    hidden_pre: Option<Matrix>,
    hidden: Option<Matrix>,
    omega: Matrix,
}

impl GateParams {
    pub fn new(dim: usize, variant: GateVariant, rng: &mut SeededRng) -> Self {
        match variant {
            GateVariant::Single => GateParams::Single { fc: Linear::new("gate.fc", dim, dim, rng) },
            GateVariant::Reduced { ratio } => {
                let hidden = (dim / ratio.max(1)).max(1);
                GateParams::Reduced {
                    fc1: Linear::new("gate.fc1", dim, hidden, rng),
                    fc2: Linear::new("gate.fc2", hidden, dim, rng),
                }
            }
        }
    }

    pub fn zeros(dim: usize) -> Self {
        GateParams::Single { fc: Linear::zeros("gate.fc", dim, dim) }
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        match self {
            GateParams::Single { fc } => fc.params().into(),
            GateParams::Reduced { fc1, fc2 } => fc1.params().into_iter().chain(fc2.params()).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            GateParams::Single { fc } => fc.params_mut().into(),
            GateParams::Reduced { fc1, fc2 } => fc1.params_mut().into_iter().chain(fc2.params_mut()).collect(),
        }
    }

    pub fn forward(&self, psi: &Matrix) -> Result<(Matrix, GateCache)> {
        let pooled = global_avg_pool(&SpatialBatch::from_vectors(psi))?;
        let (logits, hidden_pre, hidden) = match self {
            GateParams::Single { fc } => (fc.forward(&pooled)?, None, None),
            GateParams::Reduced { fc1, fc2 } => {
                let pre = fc1.forward(&pooled)?;
                let h = relu(&pre);
                (fc2.forward(&h)?, Some(pre), Some(h))
            }
        };
        let omega = sigmoid(&logits);
        Ok((omega.clone(), GateCache { pooled, hidden_pre, hidden, omega }))
    }

    /// Accumulates parameter gradients, returns the gradient w.r.t. `ψ`.
    pub fn backward(&mut self, cache: &GateCache, grad_omega: &Matrix) -> Result<Matrix> {
        let grad_logits = sigmoid_backward(&cache.omega, grad_omega)?;
        let grad_pooled = match self {
            GateParams::Single { fc } => fc.backward(&cache.pooled, &grad_logits)?,
            GateParams::Reduced { fc1, fc2 } => {
                let hidden = cache.hidden.as_ref().expect("reduced gate caches its hidden layer");
                let pre = cache.hidden_pre.as_ref().expect("reduced gate caches its hidden layer");
                let grad_h = fc2.backward(hidden, &grad_logits)?;
                fc1.backward(&cache.pooled, &relu_backward(pre, &grad_h)?)?
            }
        };
        let spread = global_avg_pool_backward(&grad_pooled, 1)?;
        Matrix::from_vec(spread.n, spread.channels, spread.data)
    }
}

/// Gate values for a batch of whitened features; every entry lies strictly in `(0, 1)`.
pub fn attention_gate(psi: &Matrix, params: &GateParams) -> Result<Matrix> {
    params.forward(psi).map(|(omega, _)| omega)
}

/// `h_id = ψ ⊙ ω`, `h_c = ψ ⊙ (1 − ω)`.
pub fn split_features(psi: &Matrix, omega: &Matrix) -> Result<(Matrix, Matrix)> {
    contract!(psi.shape() == omega.shape(), "split: psi and omega shapes differ");
    let h_id = psi.hadamard(omega)?;
    let h_c = psi.hadamard(&omega.map(|w| 1.0 - w))?;
    Ok((h_id, h_c))
}

/// Backward of [`split_features`]: returns `(∂ψ, ∂ω)`.
pub fn split_backward(psi: &Matrix, omega: &Matrix, grad_id: &Matrix, grad_c: &Matrix) -> Result<(Matrix, Matrix)> {
    contract!(
        psi.shape() == omega.shape() && grad_id.shape() == psi.shape() && grad_c.shape() == psi.shape(),
        "split backward shape mismatch"
    );
    let n = psi.as_slice().len();
    let mut grad_psi = Vec::with_capacity(n);
    let mut grad_omega = Vec::with_capacity(n);
    for i in 0..n {
        let (p, w) = (psi.as_slice()[i], omega.as_slice()[i]);
        let (gi, gc) = (grad_id.as_slice()[i], grad_c.as_slice()[i]);
        grad_psi.push(gi * w + gc * (1.0 - w));
        grad_omega.push((gi - gc) * p);
    }
    Ok((
        Matrix::from_vec(psi.rows(), psi.cols(), grad_psi)?,
        Matrix::from_vec(psi.rows(), psi.cols(), grad_omega)?,
    ))
}

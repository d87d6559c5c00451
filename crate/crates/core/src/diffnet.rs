//! Layers with hand-written reverse-mode gradients.
//!
//! There is no tape: each layer's `forward` returns whatever its `backward`
//! needs, and callers thread those caches through by hand. Parameter gradients
//! accumulate into [`ParamTensor::grad`] until [`ParamTensor::zero_grad`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::numerics::{Matrix, SeededRng};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `d_out × d_in`.
    pub weight: ParamTensor,
    /// `1 × d_out`.
    pub bias: ParamTensor,
}

impl Linear {
    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        let limit = libm::sqrt(6.0 / (d_in + d_out) as f64);
        let weight = Matrix::from_fn(d_out, d_in, |_, _| rng.uniform_range(-limit, limit));
        Self::from_parts(name, weight, Matrix::zeros(1, d_out))
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self::from_parts(name, Matrix::zeros(d_out, d_in), Matrix::zeros(1, d_out))
    }

    pub fn from_parts(name: &str, weight: Matrix, bias: Matrix) -> Self {
        Self {
            weight: ParamTensor::new(alloc::format!("{name}.weight"), weight),
            bias: ParamTensor::new(alloc::format!("{name}.bias"), bias),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        contract!(
            x.cols() == self.d_in(),
            "{}: input has {} columns, layer expects {}",
            self.weight.name,
            x.cols(),
            self.d_in()
        );
        x.matmul_t(&self.weight.value)?.add_row_vector(self.bias.value.as_slice())
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        contract!(
            grad_out.shape() == (x.rows(), self.d_out()),
            "{}: upstream gradient shape mismatch",
            self.weight.name
        );
        self.weight.grad.add_assign(&grad_out.t_matmul(x)?)?;
        let db = Matrix::from_vec(1, self.d_out(), grad_out.column_sum())?;
        self.bias.grad.add_assign(&db)?;
        grad_out.matmul(&self.weight.value)
    }

    pub fn params(&self) -> [&ParamTensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Largest `f64` below one.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Elementwise logistic function, kept inside the open interval `(0, 1)`.
///
/// Large positive inputs round to exactly 1 in `f64`; the result is clamped
/// to the largest double below one (and symmetrically to the smallest
/// positive normal) so gates never fully close.
pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// Backward of [`sigmoid`] given its output.
pub fn sigmoid_backward(output: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    contract!(output.shape() == grad_out.shape(), "sigmoid backward shape mismatch");
    let data = output
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Matrix::from_vec(output.rows(), output.cols(), data)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Backward of [`relu`] given its input.
pub fn relu_backward(input: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    contract!(input.shape() == grad_out.shape(), "relu backward shape mismatch");
    let data = input
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(input.rows(), input.cols(), data)
}

/// Per-sample cross-entropy losses plus the softmax probabilities the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub losses: Vec<f64>,
    pub probs: Matrix,
    labels: Vec<usize>,
}

/// `−log softmax(logits_i)[y_i]` per sample, via max subtraction and `log1p`
/// so confident predictions keep their tiny losses.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    let (n, c) = logits.shape();
    contract!(labels.len() == n, "{} labels for {n} logit rows", labels.len());
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(crate::Error::Contract(alloc::format!(
            "label {y} at row {i} is outside 0..{c}"
        )));
    }
    let mut losses = Vec::with_capacity(n);
    let mut probs = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(a, m), (j, &v)| if v > m { (j, v) } else { (a, m) });
        // sum of exp(l_j - max) over j != argmax
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &v)| libm::exp(v - max))
            .sum();
        let log_z = libm::log1p(rest);
        losses.push((max - row[y]) + log_z);
        let z = 1.0 + rest;
        for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = libm::exp(v - max) / z;
        }
    }
    Ok(CrossEntropy { losses, probs, labels: labels.to_vec() })
}

impl CrossEntropy {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    /// Gradient of `Σ_i coeff_i · loss_i` w.r.t. the logits.
    /// With `coeff_i = 1/n` this is the mean-loss gradient `(softmax − onehot)/n`.
    pub fn backward(&self, coeffs: &[f64]) -> Result<Matrix> {
        contract!(coeffs.len() == self.labels.len(), "one coefficient per sample required");
        let mut grad = self.probs.clone();
        for (i, (&y, &c)) in self.labels.iter().zip(coeffs).enumerate() {
            let row = grad.row_mut(i);
            row[y] -= 1.0;
            row.iter_mut().for_each(|g| *g *= c);
        }
        Ok(grad)
    }

    pub fn backward_mean(&self) -> Result<Matrix> {
        let n = self.labels.len() as f64;
        self.backward(&alloc::vec![1.0 / n; self.labels.len()])
    }
}

/// A batch of `n` samples with `channels × positions` activations each,
/// stored sample-major then channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBatch {
    pub n: usize,
    pub channels: usize,
    pub positions: usize,
    pub data: Vec<f64>,
}

impl SpatialBatch {
    pub fn new(n: usize, channels: usize, positions: usize, data: Vec<f64>) -> Result<Self> {
        contract!(
            data.len() == n * channels * positions,
            "spatial batch {n}x{channels}x{positions} needs {} values, got {}",
            n * channels * positions,
            data.len()
        );
        Ok(Self { n, channels, positions, data })
    }

    /// Vectors as a single spatial position.
    pub fn from_vectors(x: &Matrix) -> Self {
        Self { n: x.rows(), channels: x.cols(), positions: 1, data: x.as_slice().to_vec() }
    }
}

/// Mean over the spatial axis, one value per (sample, channel).
pub fn global_avg_pool(x: &SpatialBatch) -> Result<Matrix> {
    contract!(x.positions >= 1, "global average pooling over zero positions");
    let s = x.positions as f64;
    let data = x.data.chunks_exact(x.positions).map(|c| c.iter().sum::<f64>() / s).collect();
    Matrix::from_vec(x.n, x.channels, data)
}

/// Spreads the pooled gradient evenly back over the positions.
pub fn global_avg_pool_backward(grad_out: &Matrix, positions: usize) -> Result<SpatialBatch> {
    contract!(positions >= 1, "global average pooling over zero positions");
    let s = positions as f64;
    let mut data = Vec::with_capacity(grad_out.as_slice().len() * positions);
    for &g in grad_out.as_slice() {
        data.extend(core::iter::repeat_n(g / s, positions));
    }
    SpatialBatch::new(grad_out.rows(), grad_out.cols(), positions, data)
}

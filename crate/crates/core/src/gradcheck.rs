//! Finite-difference verification of every hand-written backward pass.
//!
//! Each layer is checked through a random linear readout `⟨R, f(x)⟩` at a
//! number of random points; the full model is checked through its
//! dual-branch loss with the re-weighting scores frozen.

use alloc::vec::Vec;

use crate::diffnet::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    softmax_cross_entropy, Linear, SpatialBatch,
};
use crate::diverse_norm::{
    split_backward, split_features, GateParams, GateVariant, ModelKind, Network, NetworkConfig, Weighting,
    WhiteningConfig, WhiteningState,
};
use crate::error::Result;
use crate::numerics::{finite_diff_gradient, relative_error, Matrix, SeededRng, DEFAULT_STEP, GRADIENT_SCALE_FLOOR};

pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub points: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub layers: Vec<LayerCheck>,
    /// `(seed, max relative error)` for the full loss.
    pub end_to_end: Vec<(u64, f64)>,
}

impl GradcheckReport {
    pub fn max_layer_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_relative_error).fold(0.0, f64::max)
    }

    pub fn max_end_to_end_error(&self) -> f64 {
        self.end_to_end.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_layer_error() <= LAYER_TOLERANCE && self.max_end_to_end_error() <= END_TO_END_TOLERANCE
    }
}

fn max_error(analytic: &[f64], f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Result<f64> {
    let fd = finite_diff_gradient(f, x, DEFAULT_STEP)?;
    Ok(analytic.iter().zip(&fd).map(|(a, n)| relative_error(*a, *n, GRADIENT_SCALE_FLOOR)).fold(0.0, f64::max))
}

fn normal(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

fn reshape(m: &Matrix, v: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), v.to_vec()).expect("same element count")
}

fn linear_point(rng: &mut SeededRng) -> Result<f64> {
    let (n, d_in, d_out) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5));
    let x = normal(rng, n, d_in);
    let readout = normal(rng, n, d_out);
    let mut layer = Linear::new("fc", d_in, d_out, rng);
    layer.bias.value = normal(rng, 1, d_out);
    let grad_x = layer.backward(&x, &readout)?;
    let base = layer.clone();
    let mut flat = base.weight.value.as_slice().to_vec();
    flat.extend_from_slice(base.bias.value.as_slice());
    let mut analytic = layer.weight.grad.as_slice().to_vec();
    analytic.extend_from_slice(layer.bias.grad.as_slice());
    let split = d_in * d_out;
    let e_params = max_error(
        &analytic,
        |v| {
            let l = Linear::from_parts("fc", reshape(&base.weight.value, &v[..split]), reshape(&base.bias.value, &v[split..]));
            l.forward(&x).unwrap().frobenius_dot(&readout)
        },
        &flat,
    )?;
    let e_input = max_error(
        grad_x.as_slice(),
        |v| base.forward(&reshape(&x, v)).unwrap().frobenius_dot(&readout),
        x.as_slice(),
    )?;
    Ok(e_params.max(e_input))
}

fn sigmoid_point(rng: &mut SeededRng) -> Result<f64> {
    let x = Matrix::from_fn(3, 4, |_, _| 3.0 * rng.normal());
    let readout = normal(rng, 3, 4);
    let analytic = sigmoid_backward(&sigmoid(&x), &readout)?;
    max_error(analytic.as_slice(), |v| sigmoid(&reshape(&x, v)).frobenius_dot(&readout), x.as_slice())
}

fn relu_point(rng: &mut SeededRng) -> Result<f64> {
    // keep inputs clear of the kink
    let x = Matrix::from_fn(3, 4, |_, _| {
        let m = rng.uniform_range(0.1, 2.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    });
    let readout = normal(rng, 3, 4);
    let analytic = relu_backward(&x, &readout)?;
    max_error(analytic.as_slice(), |v| relu(&reshape(&x, v)).frobenius_dot(&readout), x.as_slice())
}

fn cross_entropy_point(rng: &mut SeededRng) -> Result<f64> {
    let (n, c) = (1 + rng.below(6), 2 + rng.below(5));
    let logits = Matrix::from_fn(n, c, |_, _| 2.0 * rng.normal());
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let coeffs: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
    let analytic = softmax_cross_entropy(&logits, &labels)?.backward(&coeffs)?;
    max_error(
        analytic.as_slice(),
        |v| {
            let ce = softmax_cross_entropy(&reshape(&logits, v), &labels).unwrap();
            ce.losses.iter().zip(&coeffs).map(|(l, c)| l * c).sum()
        },
        logits.as_slice(),
    )
}

fn pool_point(rng: &mut SeededRng) -> Result<f64> {
    let (n, ch, s) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(5));
    let data: Vec<f64> = (0..n * ch * s).map(|_| rng.normal()).collect();
    let readout = normal(rng, n, ch);
    let analytic = global_avg_pool_backward(&readout, s)?;
    max_error(
        &analytic.data,
        |v| global_avg_pool(&SpatialBatch::new(n, ch, s, v.to_vec()).unwrap()).unwrap().frobenius_dot(&readout),
        &data,
    )
}

fn gate_point(rng: &mut SeededRng, variant: GateVariant) -> Result<f64> {
    let d = 2 + rng.below(5);
    let psi = normal(rng, 4, d);
    let readout = normal(rng, 4, d);
    let mut params = GateParams::new(d, variant, rng);
    let (_, cache) = params.forward(&psi)?;
    let grad_psi = params.backward(&cache, &readout)?;
    let base = params.clone();
    let flat: Vec<f64> = base.params().iter().flat_map(|p| p.value.as_slice().to_vec()).collect();
    let analytic: Vec<f64> = params.params().iter().flat_map(|p| p.grad.as_slice().to_vec()).collect();
    let e_params = max_error(
        &analytic,
        |v| {
            let mut g = base.clone();
            let mut off = 0;
            for p in g.params_mut() {
                let len = p.len();
                p.value.as_mut_slice().copy_from_slice(&v[off..off + len]);
                off += len;
            }
            g.forward(&psi).unwrap().0.frobenius_dot(&readout)
        },
        &flat,
    )?;
    let e_input = max_error(
        grad_psi.as_slice(),
        |v| base.forward(&reshape(&psi, v)).unwrap().0.frobenius_dot(&readout),
        psi.as_slice(),
    )?;
    Ok(e_params.max(e_input))
}

fn split_point(rng: &mut SeededRng) -> Result<f64> {
    let psi = normal(rng, 3, 4);
    let omega = Matrix::from_fn(3, 4, |_, _| rng.uniform_range(0.01, 0.99));
    let (ri, rc) = (normal(rng, 3, 4), normal(rng, 3, 4));
    let (dp, dw) = split_backward(&psi, &omega, &ri, &rc)?;
    let readout = |p: &Matrix, w: &Matrix| {
        let (a, b) = split_features(p, w).unwrap();
        a.frobenius_dot(&ri) + b.frobenius_dot(&rc)
    };
    let e_psi = max_error(dp.as_slice(), |v| readout(&reshape(&psi, v), &omega), psi.as_slice())?;
    let e_omega = max_error(dw.as_slice(), |v| readout(&psi, &reshape(&omega, v)), omega.as_slice())?;
    Ok(e_psi.max(e_omega))
}

fn whitening_point(rng: &mut SeededRng) -> Result<f64> {
    let d = 2 + rng.below(4);
    let n = 2 * d + rng.below(8);
    let x = Matrix::from_fn(n, d, |_, j| rng.normal() * (1.0 + 0.5 * j as f64));
    let readout = normal(rng, n, d);
    let state = WhiteningState::new(d, WhiteningConfig::default());
    let (_, cache, _) = state.forward_batch(&x)?;
    let analytic = WhiteningState::backward(&cache, &readout)?;
    max_error(
        analytic.as_slice(),
        |v| state.forward_batch(&reshape(&x, v)).unwrap().0.frobenius_dot(&readout),
        x.as_slice(),
    )
}

/// Every layer at `points` random points each.
pub fn layer_suite(seed: u64, points: usize) -> Result<Vec<LayerCheck>> {
    type Point = fn(&mut SeededRng) -> Result<f64>;
    let layers: [(&'static str, Point); 9] = [
        ("linear", linear_point),
        ("sigmoid", sigmoid_point),
        ("relu", relu_point),
        ("softmax_cross_entropy", cross_entropy_point),
        ("global_avg_pool", pool_point),
        ("gate_single", |r| gate_point(r, GateVariant::Single)),
        ("gate_reduced", |r| gate_point(r, GateVariant::Reduced { ratio: 2 })),
        ("split", split_point),
        ("whitening_newton_schulz", whitening_point),
    ];
    let mut out = Vec::with_capacity(layers.len());
    for (stream, (layer, point)) in layers.into_iter().enumerate() {
        let mut rng = SeededRng::with_stream(seed, stream as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            worst = worst.max(point(&mut rng)?);
        }
        out.push(LayerCheck { layer, points, max_relative_error: worst });
    }
    Ok(out)
}

/// Largest relative error between the analytic parameter gradient of the
/// dual-branch loss and central differences, for a random `n = 8`, `d = 6`,
/// `C = 4` model. The re-weighting scores are frozen at their value at the
/// unperturbed parameters.
pub fn end_to_end(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut net = Network::new(NetworkConfig::new(ModelKind::DiverseNorm, 6, 6, 4), &mut rng)?;
    let x = normal(&mut rng, 8, 6);
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let out = net.loss(&x, &labels, Weighting::Relative)?;
    let w = out.scores.w_c.clone();
    net.zero_grad();
    net.backward(&out)?;
    let base = net.clone();
    max_error(
        &net.grad_vector(),
        |v| {
            let mut m = base.clone();
            m.set_param_vector(v).unwrap();
            m.loss(&x, &labels, Weighting::Fixed(&w)).unwrap().total
        },
        &base.param_vector(),
    )
}

/// Layer suite at `points` points plus the end-to-end check on
/// `seed..seed + END_TO_END_SEEDS`.
pub fn run_suite(seed: u64, points: usize) -> Result<GradcheckReport> {
    let layers = layer_suite(seed, points)?;
    let end_to_end = (seed..seed + END_TO_END_SEEDS).map(|s| end_to_end(s).map(|e| (s, e))).collect::<Result<_>>()?;
    Ok(GradcheckReport { layers, end_to_end })
}

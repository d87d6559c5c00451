//! Backbone, Diverse Norm block and classifier heads, plus the single-head
//! baseline used for comparison.

use alloc::vec::Vec;

use super::gate::{split_backward, split_features, GateCache, GateParams, GateVariant};
use super::reweight::{reweight_scores, ReweightScores};
use super::whitening::{BatchStats, WhitenCache, WhiteningConfig, WhiteningState};
use crate::diffnet::{relu, relu_backward, softmax_cross_entropy, CrossEntropy, Linear, ParamTensor};
use crate::error::{contract, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Whitening, attention gate and two re-weighted identity heads.
    DiverseNorm,
    /// Backbone and one identity head trained with plain cross-entropy.
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DiverseNorm => "diverse_norm",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diverse_norm" => Some(ModelKind::DiverseNorm),
            "baseline" => Some(ModelKind::Baseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Widths of hidden backbone layers (ReLU between layers). Empty means a
    /// single linear map `input_dim → feature_dim`.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub whitening: WhiteningConfig,
    pub gate: GateVariant,
}

impl NetworkConfig {
    pub fn new(kind: ModelKind, input_dim: usize, feature_dim: usize, n_classes: usize) -> Self {
        Self {
            kind,
            input_dim,
            feature_dim,
            hidden: Vec::new(),
            n_classes,
            whitening: WhiteningConfig::default(),
            gate: GateVariant::Single,
        }
    }
}

/// Fully connected stack standing in for a convolutional backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct BackboneCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix>,
}

impl Backbone {
    fn new(config: &NetworkConfig, rng: &mut SeededRng) -> Self {
        let mut dims = Vec::with_capacity(config.hidden.len() + 2);
        dims.push(config.input_dim);
        dims.extend_from_slice(&config.hidden);
        dims.push(config.feature_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&alloc::format!("backbone.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, BackboneCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::new();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&h)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                let act = relu(&out);
                pre.push(out);
                act
            } else {
                out
            };
        }
        Ok((h, BackboneCache { inputs, pre }))
    }

    fn backward(&mut self, cache: &BackboneCache, grad_out: &Matrix) -> Result<()> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&cache.inputs[i], &g)?;
            if i > 0 {
                g = relu_backward(&cache.pre[i - 1], &g)?;
            }
        }
        Ok(())
    }
}

/// Whitening, gate and the two identity classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiverseNormBlock {
    pub whitening: WhiteningState,
    pub gate: GateParams,
    /// Classifies `h_id`.
    pub head_id: Linear,
    /// Classifies `h_c`, over the same person-identity labels.
    pub head_c: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    DiverseNorm(DiverseNormBlock),
    Baseline { classifier: Linear },
}

/// Whitened features, gate and branch embeddings for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchEmbeddings {
    pub psi: Matrix,
    pub omega: Matrix,
    pub h_id: Matrix,
    pub h_c: Matrix,
}

/// How the identity-branch losses are weighted.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    /// Relative-difficulty scores from the current losses.
    Relative,
    /// Externally frozen `w_c` values, one per sample.
    Fixed(&'a [f64]),
}

/// Saved activations for one forward invocation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    backbone: BackboneCache,
    branch: BranchCache,
}

#[derive(Debug, Clone)]
enum BranchCache {
    DiverseNorm {
        whiten: WhitenCache,
        gate: GateCache,
        embeddings: BranchEmbeddings,
        ce_id: CrossEntropy,
        ce_c: CrossEntropy,
    },
    Baseline {
        features: Matrix,
        ce: CrossEntropy,
    },
}

/// Result of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// `(1/n)·Σ_i [w_c,i·CE_id,i + CE_c,i]` (mean cross-entropy for the baseline).
    pub total: f64,
    pub loss_id: Vec<f64>,
    /// Empty for the baseline.
    pub loss_c: Vec<f64>,
    pub scores: ReweightScores,
    pub batch_stats: Option<BatchStats>,
    cache: ForwardCache,
}

impl LossOutput {
    pub fn mean_loss_id(&self) -> f64 {
        mean(&self.loss_id)
    }

    pub fn mean_loss_c(&self) -> f64 {
        mean(&self.loss_c)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-step summary for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub loss_id: f64,
    pub loss_c: f64,
    pub mean_w_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub head: Head,
}

impl Network {
    pub fn new(config: NetworkConfig, rng: &mut SeededRng) -> Result<Self> {
        contract!(
            config.input_dim > 0 && config.feature_dim > 0 && config.n_classes > 0,
            "network dimensions must be positive"
        );
        contract!(config.hidden.iter().all(|&h| h > 0), "hidden widths must be positive");
        let backbone = Backbone::new(&config, rng);
        let d = config.feature_dim;
        let head = match config.kind {
            ModelKind::DiverseNorm => Head::DiverseNorm(DiverseNormBlock {
                whitening: WhiteningState::new(d, config.whitening),
                gate: GateParams::new(d, config.gate, rng),
                head_id: Linear::new("head_id", d, config.n_classes, rng),
                head_c: Linear::new("head_c", d, config.n_classes, rng),
            }),
            ModelKind::Baseline => Head::Baseline { classifier: Linear::new("head", d, config.n_classes, rng) },
        };
        Ok(Self { config, backbone, head })
    }

    pub fn whitening(&self) -> Option<&WhiteningState> {
        match &self.head {
            Head::DiverseNorm(b) => Some(&b.whitening),
            Head::Baseline { .. } => None,
        }
    }

    pub fn whitening_mut(&mut self) -> Option<&mut WhiteningState> {
        match &mut self.head {
            Head::DiverseNorm(b) => Some(&mut b.whitening),
            Head::Baseline { .. } => None,
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self.backbone.layers.iter().flat_map(|l| l.params()).collect();
        match &self.head {
            Head::DiverseNorm(b) => {
                out.extend(b.gate.params());
                out.extend(b.head_id.params());
                out.extend(b.head_c.params());
            }
            Head::Baseline { classifier } => out.extend(classifier.params()),
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> =
            self.backbone.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        match &mut self.head {
            Head::DiverseNorm(b) => {
                out.extend(b.gate.params_mut());
                out.extend(b.head_id.params_mut());
                out.extend(b.head_c.params_mut());
            }
            Head::Baseline { classifier } => out.extend(classifier.params_mut()),
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn param_vector(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.as_slice().iter().copied()).collect()
    }

    pub fn grad_vector(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.as_slice().iter().copied()).collect()
    }

    pub fn set_param_vector(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|p| p.len()).sum();
        contract!(values.len() == total, "{} values for {total} parameters", values.len());
        let mut off = 0;
        for p in self.params_mut() {
            let len = p.len();
            p.value.as_mut_slice().copy_from_slice(&values[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Training-mode forward pass and loss. Leaves the network untouched; the
    /// whitening batch statistics are returned in [`LossOutput::batch_stats`].
    pub fn loss(&self, x: &Matrix, labels: &[usize], weighting: Weighting<'_>) -> Result<LossOutput> {
        contract!(x.rows() == labels.len(), "{} rows with {} labels", x.rows(), labels.len());
        let (features, backbone) = self.backbone.forward(x)?;
        match &self.head {
            Head::Baseline { classifier } => {
                let ce = softmax_cross_entropy(&classifier.forward(&features)?, labels)?;
                let total = ce.mean();
                let n = labels.len();
                Ok(LossOutput {
                    total,
                    loss_id: ce.losses.clone(),
                    loss_c: Vec::new(),
                    scores: ReweightScores { w_id: alloc::vec![1.0; n], w_c: alloc::vec![1.0; n] },
                    batch_stats: None,
                    cache: ForwardCache { backbone, branch: BranchCache::Baseline { features, ce } },
                })
            }
            Head::DiverseNorm(block) => {
                let (psi, whiten, stats) = block.whitening.forward_batch(&features)?;
                let (omega, gate) = block.gate.forward(&psi)?;
                let (h_id, h_c) = split_features(&psi, &omega)?;
                let ce_id = softmax_cross_entropy(&block.head_id.forward(&h_id)?, labels)?;
                let ce_c = softmax_cross_entropy(&block.head_c.forward(&h_c)?, labels)?;
                let scores = match weighting {
                    Weighting::Relative => reweight_scores(&ce_id.losses, &ce_c.losses)?,
                    Weighting::Fixed(w) => {
                        contract!(w.len() == labels.len(), "{} fixed weights for {} samples", w.len(), labels.len());
                        ReweightScores { w_id: alloc::vec![1.0; w.len()], w_c: w.to_vec() }
                    }
                };
                let n = labels.len() as f64;
                let total = ce_id
                    .losses
                    .iter()
                    .zip(&ce_c.losses)
                    .zip(&scores.w_c)
                    .map(|((li, lc), w)| w * li + lc)
                    .sum::<f64>()
                    / n;
                Ok(LossOutput {
                    total,
                    loss_id: ce_id.losses.clone(),
                    loss_c: ce_c.losses.clone(),
                    scores,
                    batch_stats: Some(stats),
                    cache: ForwardCache {
                        backbone,
                        branch: BranchCache::DiverseNorm {
                            whiten,
                            gate,
                            embeddings: BranchEmbeddings { psi, omega, h_id, h_c },
                            ce_id,
                            ce_c,
                        },
                    },
                })
            }
        }
    }

    /// Accumulates `∂total/∂θ` into every parameter's gradient, treating the
    /// re-weighting scores as constants.
    pub fn backward(&mut self, out: &LossOutput) -> Result<()> {
        let n = out.loss_id.len() as f64;
        let grad_features = match (&mut self.head, &out.cache.branch) {
            (Head::Baseline { classifier }, BranchCache::Baseline { features, ce }) => {
                let grad_logits = ce.backward_mean()?;
                classifier.backward(features, &grad_logits)?
            }
            (Head::DiverseNorm(block), BranchCache::DiverseNorm { whiten, gate, embeddings, ce_id, ce_c }) => {
                let coeff_id: Vec<f64> = out.scores.w_c.iter().map(|w| w / n).collect();
                let coeff_c = alloc::vec![1.0 / n; out.loss_c.len()];
                let grad_h_id = block.head_id.backward(&embeddings.h_id, &ce_id.backward(&coeff_id)?)?;
                let grad_h_c = block.head_c.backward(&embeddings.h_c, &ce_c.backward(&coeff_c)?)?;
                let (mut grad_psi, grad_omega) =
                    split_backward(&embeddings.psi, &embeddings.omega, &grad_h_id, &grad_h_c)?;
                grad_psi.add_assign(&block.gate.backward(gate, &grad_omega)?)?;
                WhiteningState::backward(whiten, &grad_psi)?
            }
            _ => return Err(crate::Error::Contract("forward cache from a different model kind".into())),
        };
        self.backbone.backward(&out.cache.backbone, &grad_features)
    }

    /// One training computation: zeroes gradients, evaluates the dual-branch
    /// loss with relative-difficulty weights, backpropagates and folds the
    /// batch statistics into the running whitening statistics.
    pub fn dual_branch_loss(&mut self, x: &Matrix, labels: &[usize]) -> Result<StepStats> {
        self.zero_grad();
        let out = self.loss(x, labels, Weighting::Relative)?;
        if !out.total.is_finite() {
            return Err(crate::Error::InvalidInput(alloc::format!("non-finite loss {}", out.total)));
        }
        self.backward(&out)?;
        if let (Some(w), Some(stats)) = (self.whitening_mut(), out.batch_stats.as_ref()) {
            w.update_running(stats);
        }
        Ok(StepStats {
            total: out.total,
            loss_id: out.mean_loss_id(),
            loss_c: out.mean_loss_c(),
            mean_w_c: out.scores.mean_w_c(),
        })
    }

    /// Eval-mode branch embeddings. The whitening transform is built once from
    /// the running statistics for the whole call.
    pub fn branch_embeddings(&self, x: &Matrix) -> Result<BranchEmbeddings> {
        let (features, _) = self.backbone.forward(x)?;
        match &self.head {
            Head::DiverseNorm(block) => {
                let whitener = block.whitening.eval_whitener()?;
                let psi = whitener.apply(&features)?;
                let (omega, _) = block.gate.forward(&psi)?;
                let (h_id, h_c) = split_features(&psi, &omega)?;
                Ok(BranchEmbeddings { psi, omega, h_id, h_c })
            }
            Head::Baseline { .. } => {
                let (n, d) = features.shape();
                let mut omega = Matrix::zeros(n, d);
                omega.fill(1.0);
                Ok(BranchEmbeddings { h_id: features.clone(), h_c: Matrix::zeros(n, d), psi: features, omega })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error, DEFAULT_STEP, GRADIENT_SCALE_FLOOR};

    fn small(kind: ModelKind, seed: u64) -> (Network, Matrix, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let net = Network::new(NetworkConfig::new(kind, 6, 6, 4), &mut rng).unwrap();
        let x = Matrix::from_fn(8, 6, |_, _| rng.normal());
        let labels = (0..8).map(|i| i % 4).collect();
        (net, x, labels)
    }

    #[test]
    fn equal_branch_losses_reduce_to_plain_sum() {
        let (net, x, labels) = small(ModelKind::DiverseNorm, 1);
        let out = net.loss(&x, &labels, Weighting::Fixed(&[1.0; 8])).unwrap();
        let expect = out.mean_loss_id() + out.mean_loss_c();
        assert!((out.total - expect).abs() < 1e-14);
    }

    #[test]
    fn clothing_failure_doubles_identity_weight() {
        let s = reweight_scores(&[0.01, 1.0], &[1e6, 1.0]).unwrap();
        assert!((s.w_c[0] - 2.0).abs() < 1e-7);
        assert_eq!(s.w_c[1], 1.0);
    }

    #[test]
    fn frozen_and_recomputed_weights_give_identical_gradients() {
        let (mut net, x, labels) = small(ModelKind::DiverseNorm, 2);
        let out = net.loss(&x, &labels, Weighting::Relative).unwrap();
        net.zero_grad();
        net.backward(&out).unwrap();
        let g_relative = net.grad_vector();

        let frozen = out.scores.w_c.clone();
        let out2 = net.loss(&x, &labels, Weighting::Fixed(&frozen)).unwrap();
        net.zero_grad();
        net.backward(&out2).unwrap();
        assert_eq!(g_relative, net.grad_vector());
        assert_eq!(out.total, out2.total);
    }

    fn gradient_check(kind: ModelKind, seed: u64) {
        let (mut net, x, labels) = small(kind, seed);
        let out = net.loss(&x, &labels, Weighting::Relative).unwrap();
        let w = out.scores.w_c.clone();
        net.zero_grad();
        net.backward(&out).unwrap();
        let analytic = net.grad_vector();
        let base = net.clone();
        let fd = finite_diff_gradient(
            |v| {
                let mut m = base.clone();
                m.set_param_vector(v).unwrap();
                m.loss(&x, &labels, Weighting::Fixed(&w)).unwrap().total
            },
            &base.param_vector(),
            DEFAULT_STEP,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&fd) {
            assert!(relative_error(*a, *n, GRADIENT_SCALE_FLOOR) <= 1e-5, "{kind:?}: {a} vs {n}");
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        gradient_check(ModelKind::DiverseNorm, 3);
        gradient_check(ModelKind::Baseline, 4);
    }

    #[test]
    fn step_updates_running_statistics() {
        let (mut net, x, labels) = small(ModelKind::DiverseNorm, 5);
        assert!(net.branch_embeddings(&x).is_err());
        let stats = net.dual_branch_loss(&x, &labels).unwrap();
        assert!(stats.total.is_finite());
        assert_eq!(net.whitening().unwrap().updates, 1);
        let emb = net.branch_embeddings(&x).unwrap();
        let recon = emb.h_id.add(&emb.h_c).unwrap();
        assert!(recon.max_abs_diff(&emb.psi) <= 1e-6);
        assert!(emb.omega.as_slice().iter().all(|&w| w > 0.0 && w < 1.0));
    }

    #[test]
    fn hidden_backbone_layers() {
        let mut rng = SeededRng::new(6);
        let mut cfg = NetworkConfig::new(ModelKind::DiverseNorm, 5, 4, 3);
        cfg.hidden = alloc::vec![7];
        cfg.gate = GateVariant::Reduced { ratio: 2 };
        let mut net = Network::new(cfg, &mut rng).unwrap();
        assert_eq!(net.backbone.layers.len(), 2);
        let x = Matrix::from_fn(6, 5, |_, _| rng.normal());
        let labels = [0, 1, 2, 0, 1, 2];
        let out = net.loss(&x, &labels, Weighting::Relative).unwrap();
        let w = out.scores.w_c.clone();
        net.zero_grad();
        net.backward(&out).unwrap();
        let analytic = net.grad_vector();
        let base = net.clone();
        let fd = finite_diff_gradient(
            |v| {
                let mut m = base.clone();
                m.set_param_vector(v).unwrap();
                m.loss(&x, &labels, Weighting::Fixed(&w)).unwrap().total
            },
            &base.param_vector(),
            DEFAULT_STEP,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&fd) {
            assert!(relative_error(*a, *n, GRADIENT_SCALE_FLOOR) <= 1e-5, "{a} vs {n}");
        }
    }
}

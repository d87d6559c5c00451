//! Identity-balanced batches, Adam, the stepped learning-rate schedule and
//! the resumable training loop.

use alloc::format;
use alloc::vec::Vec;

use crate::diffnet::ParamTensor;
use crate::diverse_norm::{Network, NetworkConfig};
use crate::error::{contract, Error, Result};
use crate::numerics::{Matrix, RngState, SeededRng};
use crate::synth::{Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity in a batch.
    pub k: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 8,
            k: 8,
            epochs: 30,
            lr0: 3.5e-4,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p >= 1
            && self.k >= 1
            && self.epochs >= 1
            && self.lr_decay_every >= 1
            && self.lr0 > 0.0
            && self.lr0.is_finite()
            && self.lr_decay_factor > 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// `lr0 · factor^⌊e / every⌋`. When `1/factor` is an integer the decay is
/// applied as a division so that a factor of 0.1 yields exactly 3.5e-5 and
/// 3.5e-6 from 3.5e-4 rather than values one ulp away.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = (epoch / config.lr_decay_every) as i32;
    let inverse = 1.0 / config.lr_decay_factor;
    let rounded = libm::round(inverse);
    if (inverse - rounded).abs() <= 1e-9 * rounded && rounded >= 1.0 {
        config.lr0 / libm::pow(rounded, steps as f64)
    } else {
        config.lr0 * libm::pow(config.lr_decay_factor, steps as f64)
    }
}

/// One epoch of P×K batches over `labels` (one dense class label per row).
///
/// Each identity's rows are shuffled and cut into chunks of `k`, dropping the
/// remainder; identities with fewer than `k` rows get a single chunk drawn
/// with replacement. Batches repeatedly take `p` distinct identities that
/// still have chunks. Identities left unvisited when fewer than `p` remain
/// are placed in final batches padded with freshly drawn identities.
pub fn pk_batches(labels: &[usize], p: usize, k: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    contract!(p >= 1 && k >= 1, "p = {p}, k = {k}");
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rows: Vec<Vec<usize>> = alloc::vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        rows[l].push(i);
    }
    let ids: Vec<usize> = (0..n_classes).filter(|&c| !rows[c].is_empty()).collect();
    if ids.len() < p {
        return Err(Error::Config(format!("{} identities with training samples, batches need {p}", ids.len())));
    }
    let draw_chunk = |c: usize, rng: &mut SeededRng| -> Vec<usize> {
        let pool = &rows[c];
        (0..k).map(|_| pool[rng.below(pool.len())]).collect()
    };

    let mut chunks: Vec<Vec<Vec<usize>>> = alloc::vec![Vec::new(); n_classes];
    for &c in &ids {
        if rows[c].len() < k {
            chunks[c].push(draw_chunk(c, rng));
        } else {
            let mut pool = rows[c].clone();
            rng.shuffle(&mut pool);
            for chunk in pool.chunks_exact(k) {
                chunks[c].push(chunk.to_vec());
            }
        }
    }

    let mut covered = alloc::vec![false; n_classes];
    let mut batches = Vec::new();
    loop {
        let mut avail: Vec<usize> = ids.iter().copied().filter(|&c| !chunks[c].is_empty()).collect();
        if avail.len() < p {
            break;
        }
        rng.shuffle(&mut avail);
        let mut batch = Vec::with_capacity(p * k);
        for &c in &avail[..p] {
            batch.extend(chunks[c].pop().expect("available identity has a chunk"));
            covered[c] = true;
        }
        batches.push(batch);
    }

    let mut missing: Vec<usize> = ids.iter().copied().filter(|&c| !covered[c]).collect();
    rng.shuffle(&mut missing);
    for group in missing.chunks(p) {
        let mut chosen: Vec<usize> = group.to_vec();
        let mut others: Vec<usize> = ids.iter().copied().filter(|c| !chosen.contains(c)).collect();
        rng.shuffle(&mut others);
        chosen.extend(others.into_iter().take(p - group.len()));
        let mut batch = Vec::with_capacity(p * k);
        for c in chosen {
            match chunks[c].pop() {
                Some(chunk) => batch.extend(chunk),
                None => batch.extend(draw_chunk(c, rng)),
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[&ParamTensor]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update over every tensor. Nothing is modified
/// when any gradient is non-finite.
pub fn adam_step(params: &mut [&mut ParamTensor], state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    contract!(params.len() == state.m.len(), "{} tensors for {} moment slots", params.len(), state.m.len());
    for (p, m) in params.iter().zip(&state.m) {
        contract!(p.grad.shape() == m.shape(), "moment shape mismatch for {}", p.name);
        if let Some(v) = p.grad.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite gradient {v} in tensor {}", p.name)));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - libm::pow(b1, state.t as f64);
    let c2 = 1.0 - libm::pow(b2, state.t as f64);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.as_slice();
        let values = p.value.as_mut_slice();
        for (((x, &g), mi), vi) in values.iter_mut().zip(grads).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (libm::sqrt(v_hat) + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_id: f64,
    pub loss_c: f64,
    pub mean_w_c: f64,
    pub lr: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Generator position at the start of the next epoch.
    pub rng: RngState,
}

const EPOCH_STREAM_BASE: u64 = 1 << 32;

fn epoch_rng(seed: u64, epoch: usize) -> SeededRng {
    SeededRng::with_stream(seed, EPOCH_STREAM_BASE + epoch as u64)
}

/// Training rows of `ds` with their dense labels.
pub fn training_set(ds: &Dataset) -> Result<(Matrix, Vec<usize>)> {
    let rows = ds.indices(Split::Train);
    if rows.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let map = ds.train_label_map();
    let labels = rows.iter().map(|&i| map[&ds.meta[i].person_id]).collect();
    Ok((ds.features.select_rows(&rows), labels))
}

pub struct Trainer<'a> {
    pub checkpoint: Checkpoint,
    x: &'a Matrix,
    labels: &'a [usize],
}

impl<'a> Trainer<'a> {
    pub fn new(checkpoint: Checkpoint, x: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        contract!(x.rows() == labels.len(), "{} rows with {} labels", x.rows(), labels.len());
        contract!(
            x.cols() == checkpoint.network.config.input_dim,
            "{} feature columns for a network expecting {}",
            x.cols(),
            checkpoint.network.config.input_dim
        );
        let classes = checkpoint.network.config.n_classes;
        contract!(labels.iter().all(|&l| l < classes), "label outside 0..{classes}");
        Ok(Self { checkpoint, x, labels })
    }

    /// Fresh network and optimizer state; parameters are drawn from the
    /// training seed.
    pub fn start(net: NetworkConfig, config: TrainConfig, x: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        config.validate()?;
        let mut init = SeededRng::new(config.seed);
        let network = Network::new(net, &mut init)?;
        let adam = AdamState::new(&network.params());
        let rng = epoch_rng(config.seed, 0).state();
        Self::new(Checkpoint { network, adam, config, epoch: 0, rng }, x, labels)
    }

    pub fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<crate::diverse_norm::StepStats> {
        let x = self.x.select_rows(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let ck = &mut self.checkpoint;
        let stats = ck.network.dual_branch_loss(&x, &labels)?;
        adam_step(&mut ck.network.params_mut(), &mut ck.adam, lr, &ck.config)?;
        Ok(stats)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.checkpoint.epoch;
        let config = self.checkpoint.config;
        let lr = lr_at_epoch(epoch, &config);
        let mut rng = SeededRng::from_state(self.checkpoint.rng);
        let batches = pk_batches(self.labels, config.p, config.k, &mut rng)?;
        let mut sums = [0.0; 4];
        for (b, batch) in batches.iter().enumerate() {
            let s = self.train_step(batch, lr).map_err(|e| match e {
                Error::InvalidInput(msg) => Error::InvalidInput(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            for (acc, v) in sums.iter_mut().zip([s.total, s.loss_id, s.loss_c, s.mean_w_c]) {
                *acc += v;
            }
        }
        let nb = batches.len() as f64;
        self.checkpoint.epoch += 1;
        self.checkpoint.rng = epoch_rng(config.seed, self.checkpoint.epoch).state();
        Ok(EpochLog {
            epoch,
            loss_total: sums[0] / nb,
            loss_id: sums[1] / nb,
            loss_c: sums[2] / nb,
            mean_w_c: sums[3] / nb,
            lr,
        })
    }

    /// Runs epochs until `until` have completed.
    pub fn run_until(&mut self, until: usize) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.checkpoint.epoch < until {
            logs.push(self.run_epoch()?);
        }
        Ok(logs)
    }
}

pub fn train_run(ds: &Dataset, net: NetworkConfig, config: TrainConfig) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let (x, labels) = training_set(ds)?;
    let mut trainer = Trainer::start(net, config, &x, &labels)?;
    let logs = trainer.run_until(config.epochs)?;
    Ok((trainer.checkpoint, logs))
}

/// Continues `checkpoint` up to its configured epoch count.
pub fn resume(ds: &Dataset, checkpoint: Checkpoint) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let (x, labels) = training_set(ds)?;
    let until = checkpoint.config.epochs;
    let mut trainer = Trainer::new(checkpoint, &x, &labels)?;
    let logs = trainer.run_until(until)?;
    Ok((trainer.checkpoint, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diverse_norm::ModelKind;
    use crate::synth::{generate, SynthConfig};
    use alloc::collections::BTreeSet;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &c), 3.5e-4);
        assert_eq!(lr_at_epoch(19, &c), 3.5e-4);
        assert_eq!(lr_at_epoch(20, &c), 3.5e-5);
        assert_eq!(lr_at_epoch(40, &c), 3.5e-6);
        let odd = TrainConfig { lr_decay_factor: 0.3, lr0: 1.0, lr_decay_every: 1, ..c };
        assert!((lr_at_epoch(2, &odd) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn pk_batches_have_p_identities_of_k() {
        let labels: Vec<usize> = (0..50).flat_map(|c| core::iter::repeat_n(c, 24)).collect();
        let mut rng = SeededRng::new(1);
        let batches = pk_batches(&labels, 8, 8, &mut rng).unwrap();
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 64);
            let ids: BTreeSet<usize> = b.iter().map(|&i| labels[i]).collect();
            assert_eq!(ids.len(), 8);
            for id in &ids {
                assert_eq!(b.iter().filter(|&&i| labels[i] == *id).count(), 8);
            }
            seen.extend(ids);
        }
        assert_eq!(seen.len(), 50);
        assert_eq!(batches, pk_batches(&labels, 8, 8, &mut SeededRng::new(1)).unwrap());
    }

    #[test]
    fn small_identities_are_sampled_with_replacement() {
        let mut labels: Vec<usize> = (0..8).flat_map(|c| core::iter::repeat_n(c, 8)).collect();
        labels.truncate(61);
        let batches = pk_batches(&labels, 8, 8, &mut SeededRng::new(2)).unwrap();
        let small: Vec<usize> = batches[0].iter().copied().filter(|&i| labels[i] == 7).collect();
        assert_eq!(small.len(), 8);
        assert!(small.iter().all(|&i| (56..61).contains(&i)));
    }

    #[test]
    fn too_few_identities() {
        let labels = [0, 0, 1, 1];
        assert!(matches!(pk_batches(&labels, 3, 2, &mut SeededRng::new(0)), Err(Error::Config(_))));
    }

    fn tensor(values: &[f64], grads: &[f64]) -> ParamTensor {
        let mut p = ParamTensor::new("w", Matrix::from_vec(1, values.len(), values.to_vec()).unwrap());
        p.grad = Matrix::from_vec(1, grads.len(), grads.to_vec()).unwrap();
        p
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let c = TrainConfig::default();
        let mut p = tensor(&[1.0, -2.0, 0.5], &[3.0, -0.01, 0.0]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut st, 0.1, &c).unwrap();
        let v = p.value.as_slice();
        assert!((v[0] - 0.9).abs() < 1e-8);
        assert!((v[1] - -1.9).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let c = TrainConfig::default();
        let mut p = tensor(&[1.0], &[2.0]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut st, 0.1, &c).unwrap();
        let (before, m) = (p.value.clone(), st.m[0].as_slice()[0]);
        p.grad.fill(0.0);
        adam_step(&mut [&mut p], &mut st, 0.0, &c).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(st.m[0].as_slice()[0], 0.9 * m);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = tensor(&[1.0], &[f64::NAN]);
        let mut st = AdamState::new(&[&p]);
        let err = adam_step(&mut [&mut p], &mut st, 0.1, &TrainConfig::default()).unwrap_err();
        assert!(alloc::format!("{err}").contains("tensor w"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn adam_minimises_a_convex_quadratic() {
        // f(x) = ½ Σ a_i (x_i − b_i)²
        let a = [1.0, 2.0, 0.5, 1.5];
        let b = [0.1, -0.05, 0.08, 0.02];
        let c = TrainConfig::default();
        let mut p = tensor(&[0.0; 4], &[0.0; 4]);
        let mut st = AdamState::new(&[&p]);
        let grad = |x: &[f64]| -> Vec<f64> { (0..4).map(|i| a[i] * (x[i] - b[i])).collect() };
        for t in 0..100 {
            let g = grad(p.value.as_slice());
            p.grad.as_mut_slice().copy_from_slice(&g);
            adam_step(&mut [&mut p], &mut st, 0.02 * libm::pow(0.97, t as f64), &c).unwrap();
        }
        let g = grad(p.value.as_slice());
        assert!(crate::numerics::norm(&g) < 1e-3, "{g:?}");
    }

    fn tiny_run() -> (Dataset, NetworkConfig, TrainConfig) {
        let ds = generate(&SynthConfig { n_ids: 10, seed: 1, ..SynthConfig::default() }).unwrap();
        let net = NetworkConfig::new(ModelKind::DiverseNorm, 32, 8, 10);
        let cfg = TrainConfig { p: 4, k: 4, epochs: 4, seed: 11, ..TrainConfig::default() };
        (ds, net, cfg)
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (ds, net, cfg) = tiny_run();
        let (a, logs_a) = train_run(&ds, net.clone(), cfg).unwrap();
        let (b, logs_b) = train_run(&ds, net.clone(), cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(logs_a, logs_b);
        assert!(logs_a.iter().all(|l| (0.0..=2.0).contains(&l.mean_w_c)));

        let (x, labels) = training_set(&ds).unwrap();
        let mut first = Trainer::start(net, cfg, &x, &labels).unwrap();
        first.run_until(2).unwrap();
        let (resumed, tail) = resume(&ds, first.checkpoint.clone()).unwrap();
        assert_eq!(resumed, a);
        assert_eq!(tail, logs_a[2..]);
    }
}

//! Flat `key = value` experiment configuration with `#` comments.
//!
//! Every key has a default (see [`KEYS`]). Layers are applied in order:
//! defaults, then a config file, then command-line flags. Unknown keys are
//! rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use divnorm_core::diverse_norm::{GateVariant, ModelKind, NetworkConfig, WhiteningConfig, WhiteningMethod};
use divnorm_core::retrieval::{Protocol, Strategy};
use divnorm_core::synth::{Mixing, SynthConfig};
use divnorm_core::trainer::TrainConfig;

use crate::error::{CliError, Result};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "DIVNORM_OUT";

/// `(key, description)` for every accepted key, in manifest order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data synthesis, initialization and batch order (default 0)"),
    ("out_dir", "output directory (default $DIVNORM_OUT, else `out`)"),
    ("data", "dataset CSV to read (default <out_dir>/dataset.csv)"),
    ("checkpoint", "checkpoint to read (default <out_dir>/checkpoint.bin)"),
    ("n_ids", "identities (default 50)"),
    ("outfits_per_id", "outfits per identity, at least 2 (default 5)"),
    ("samples_per_outfit", "samples per outfit (default 8)"),
    ("n_cameras", "cameras, assigned round-robin (default 4)"),
    ("d_id", "identity latent dimension (default 8)"),
    ("d_c", "clothing latent dimension (default 8)"),
    ("d_obs", "observed feature dimension (default 32)"),
    ("noise_std", "observation noise standard deviation (default 0.3)"),
    ("id_occlusion_rate", "probability that a sample hides its identity factor (default 0.2)"),
    ("clothes_occlusion_rate", "probability that a sample hides its clothing factor (default 0.2)"),
    ("mixing", "random | embedding (default random)"),
    ("clothes_gain", "clothing scale in the mixing map (default 2)"),
    ("model", "diverse_norm | baseline (default diverse_norm)"),
    ("feature_dim", "backbone output width (default 16)"),
    ("hidden", "comma-separated hidden backbone widths, empty for none (default empty)"),
    ("whitening_method", "newton_schulz | exact (default newton_schulz)"),
    ("ns_iterations", "Newton-Schulz iterations (default 5)"),
    ("whitening_eps", "covariance ridge (default 0.00001)"),
    ("whitening_momentum", "running-statistics momentum (default 0.1)"),
    ("gate", "single | reduced (default single)"),
    ("gate_ratio", "reduction ratio of the reduced gate (default 4)"),
    ("p", "identities per batch (default 8)"),
    ("k", "samples per identity in a batch (default 8)"),
    ("epochs", "training epochs (default 30)"),
    ("lr0", "initial learning rate (default 0.00035)"),
    ("lr_decay_every", "epochs between learning-rate decays (default 20)"),
    ("lr_decay_factor", "learning-rate decay factor (default 0.1)"),
    ("adam_beta1", "Adam first-moment decay (default 0.9)"),
    ("adam_beta2", "Adam second-moment decay (default 0.999)"),
    ("adam_eps", "Adam denominator offset (default 0.00000001)"),
    ("protocols", "comma-separated subset of general,sc,cc (default general,sc,cc)"),
    ("strategies", "comma-separated subset of sim_sum,feat_sum (default sim_sum,feat_sum)"),
    ("per_query", "also write per-query CSVs from eval (default false)"),
    ("seeds", "comma-separated seeds for the ablations (default 0,1,2)"),
    ("keep_fractions", "comma-separated outfit fractions for ablate-drop-clothes (default 0.25,0.5,0.75,1)"),
    ("gradcheck_points", "random points per layer in gradcheck (default 100)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// The seed inside is ignored; [`ExperimentConfig::synth_config`] fills it in.
    pub synth: SynthConfig,
    pub model: ModelKind,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub whitening: WhiteningConfig,
    pub gate: GateVariant,
    gate_ratio: usize,
    /// The seed inside is ignored; [`ExperimentConfig::train_config`] fills it in.
    pub train: TrainConfig,
    pub protocols: Vec<Protocol>,
    pub strategies: Vec<Strategy>,
    pub per_query: bool,
    pub seeds: Vec<u64>,
    pub keep_fractions: Vec<f64>,
    pub gradcheck_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            synth: SynthConfig::default(),
            model: ModelKind::DiverseNorm,
            feature_dim: 16,
            hidden: Vec::new(),
            whitening: WhiteningConfig::default(),
            gate: GateVariant::Single,
            gate_ratio: 4,
            train: TrainConfig::default(),
            protocols: Protocol::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            per_query: false,
            seeds: vec![0, 1, 2],
            keep_fractions: vec![0.25, 0.5, 0.75, 1.0],
            gradcheck_points: 100,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| CliError::Validation(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v)).collect()
}

fn parse_named<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse(v.trim()).ok_or_else(|| CliError::Validation(format!("invalid value `{v}` for `{key}`"))))
        .collect()
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Defaults, with `out_dir` taken from [`OUT_ENV`] when it is set.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|d| !d.is_empty()) {
            c.out_dir = PathBuf::from(dir);
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "n_ids" => s.n_ids = parse_value(key, v)?,
            "outfits_per_id" => s.outfits_per_id = parse_value(key, v)?,
            "samples_per_outfit" => s.samples_per_outfit = parse_value(key, v)?,
            "n_cameras" => s.n_cameras = parse_value(key, v)?,
            "d_id" => s.d_id = parse_value(key, v)?,
            "d_c" => s.d_c = parse_value(key, v)?,
            "d_obs" => s.d_obs = parse_value(key, v)?,
            "noise_std" => s.noise_std = parse_value(key, v)?,
            "id_occlusion_rate" => s.id_occlusion_rate = parse_value(key, v)?,
            "clothes_occlusion_rate" => s.clothes_occlusion_rate = parse_value(key, v)?,
            "mixing" => s.mixing = parse_named(key, v, Mixing::parse)?.pop().unwrap_or(Mixing::Random),
            "clothes_gain" => s.clothes_gain = parse_value(key, v)?,
            "model" => {
                self.model = ModelKind::parse(v).ok_or_else(|| CliError::Validation(format!("invalid value `{v}` for `model`")))?
            }
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "whitening_method" => {
                self.whitening.method = WhiteningMethod::parse(v)
                    .ok_or_else(|| CliError::Validation(format!("invalid value `{v}` for `whitening_method`")))?
            }
            "ns_iterations" => self.whitening.iterations = parse_value(key, v)?,
            "whitening_eps" => self.whitening.eps = parse_value(key, v)?,
            "whitening_momentum" => self.whitening.momentum = parse_value(key, v)?,
            "gate" => {
                self.gate = match v {
                    "single" => GateVariant::Single,
                    "reduced" => GateVariant::Reduced { ratio: self.gate_ratio },
                    _ => return Err(CliError::Validation(format!("invalid value `{v}` for `gate`"))),
                }
            }
            "gate_ratio" => {
                self.gate_ratio = parse_value(key, v)?;
                if let GateVariant::Reduced { ratio } = &mut self.gate {
                    *ratio = self.gate_ratio;
                }
            }
            "p" => t.p = parse_value(key, v)?,
            "k" => t.k = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "lr0" => t.lr0 = parse_value(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse_value(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse_value(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse_value(key, v)?,
            "adam_eps" => t.adam_eps = parse_value(key, v)?,
            "protocols" => self.protocols = parse_named(key, v, Protocol::parse)?,
            "strategies" => self.strategies = parse_named(key, v, Strategy::parse)?,
            "per_query" => self.per_query = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "keep_fractions" => self.keep_fractions = parse_list(key, v)?,
            "gradcheck_points" => self.gradcheck_points = parse_value(key, v)?,
            _ => return Err(CliError::Validation(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.synth;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "data" => path(&self.data),
            "checkpoint" => path(&self.checkpoint),
            "n_ids" => s.n_ids.to_string(),
            "outfits_per_id" => s.outfits_per_id.to_string(),
            "samples_per_outfit" => s.samples_per_outfit.to_string(),
            "n_cameras" => s.n_cameras.to_string(),
            "d_id" => s.d_id.to_string(),
            "d_c" => s.d_c.to_string(),
            "d_obs" => s.d_obs.to_string(),
            "noise_std" => s.noise_std.to_string(),
            "id_occlusion_rate" => s.id_occlusion_rate.to_string(),
            "clothes_occlusion_rate" => s.clothes_occlusion_rate.to_string(),
            "mixing" => s.mixing.name().to_string(),
            "clothes_gain" => s.clothes_gain.to_string(),
            "model" => self.model.name().to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "hidden" => join(&self.hidden),
            "whitening_method" => self.whitening.method.name().to_string(),
            "ns_iterations" => self.whitening.iterations.to_string(),
            "whitening_eps" => self.whitening.eps.to_string(),
            "whitening_momentum" => self.whitening.momentum.to_string(),
            "gate" => match self.gate {
                GateVariant::Single => "single".into(),
                GateVariant::Reduced { .. } => "reduced".into(),
            },
            "gate_ratio" => self.gate_ratio.to_string(),
            "p" => t.p.to_string(),
            "k" => t.k.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr0" => t.lr0.to_string(),
            "lr_decay_every" => t.lr_decay_every.to_string(),
            "lr_decay_factor" => t.lr_decay_factor.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "protocols" => join(self.protocols.iter().map(|p| p.name())),
            "strategies" => join(self.strategies.iter().map(|s| s.name())),
            "per_query" => self.per_query.to_string(),
            "seeds" => join(&self.seeds),
            "keep_fractions" => join(&self.keep_fractions),
            "gradcheck_points" => self.gradcheck_points.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file's assignments on top of `self`.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (line, key, value) in parse_assignments(text, source_name)? {
            self.set(&key, &value).map_err(|e| CliError::parse(source_name, line, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    /// Rejects settings that cannot run, before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CliError::Validation(m.to_string()));
        if self.protocols.is_empty() {
            return fail("the protocol list is empty");
        }
        if self.strategies.is_empty() {
            return fail("the strategy list is empty");
        }
        if self.seeds.is_empty() {
            return fail("the seed list is empty");
        }
        if self.keep_fractions.is_empty() {
            return fail("the keep_fraction list is empty");
        }
        if let Some(f) = self.keep_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CliError::Validation(format!("keep_fraction {f} is outside (0, 1]")));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return fail("layer widths must be positive");
        }
        if self.whitening.iterations == 0 || !(self.whitening.momentum > 0.0 && self.whitening.momentum <= 1.0) {
            return fail("ns_iterations must be positive and whitening_momentum in (0, 1]");
        }
        if !(self.whitening.eps >= 0.0 && self.whitening.eps.is_finite()) {
            return fail("whitening_eps must be a finite non-negative number");
        }
        if self.gate_ratio == 0 {
            return fail("gate_ratio must be positive");
        }
        self.synth_config(self.seed).validate()?;
        self.train_config(self.seed).validate()?;
        Ok(())
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig { seed, ..self.synth }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train }
    }

    pub fn network_config(&self, input_dim: usize, n_classes: usize) -> NetworkConfig {
        NetworkConfig {
            kind: self.model,
            input_dim,
            feature_dim: self.feature_dim,
            hidden: self.hidden.clone(),
            n_classes,
            whitening: self.whitening,
            gate: self.gate,
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out_dir.join("dataset.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.bin"))
    }
}

/// `(line, key, value)` for each assignment; blank lines and `#` comments are skipped.
pub fn parse_assignments(text: &str, source_name: &str) -> Result<Vec<(u64, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| CliError::parse(source_name, line, format!("expected `key = value`, found `{content}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::parse(source_name, line, "empty key"));
        }
        out.push((line, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic          7 bytes   "DIVNORM"
//! version        u32       FORMAT_VERSION
//! tensor count   u32
//! per tensor:    name_len u32, name (UTF-8), rows u64, cols u64, rows*cols f64
//! entry count    u32
//! per entry:     key_len u32, key (UTF-8), value_len u32, value (UTF-8)
//! ```
//!
//! Tensors are every trainable parameter under its own name, the whitening
//! running statistics (`whitening.running_mean`, `whitening.running_cov`) and
//! the Adam moments (`adam.m.<name>`, `adam.v.<name>`). The entries hold the
//! network and training configuration, the epoch counter, the Adam step, the
//! number of running-statistics updates and the generator position. Floats in
//! entries use the shortest decimal form that parses back to the same bits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use divnorm_core::diverse_norm::{
    GateVariant, Mode, ModelKind, Network, NetworkConfig, WhiteningConfig, WhiteningMethod,
};
use divnorm_core::numerics::RngState;
use divnorm_core::trainer::{AdamState, Checkpoint, TrainConfig};
use divnorm_core::{Matrix, SeededRng};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 7] = b"DIVNORM";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_str(buf, name);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn entries(ck: &Checkpoint) -> Vec<(&'static str, String)> {
    let net = &ck.network.config;
    let t = &ck.config;
    let (gate, ratio) = match net.gate {
        GateVariant::Single => ("single", 1),
        GateVariant::Reduced { ratio } => ("reduced", ratio),
    };
    let hidden: Vec<String> = net.hidden.iter().map(|h| h.to_string()).collect();
    let (mode, updates) = match ck.network.whitening() {
        Some(w) => (if w.mode == Mode::Eval { "eval" } else { "train" }, w.updates),
        None => ("train", 0),
    };
    vec![
        ("model", net.kind.name().into()),
        ("input_dim", net.input_dim.to_string()),
        ("feature_dim", net.feature_dim.to_string()),
        ("hidden", hidden.join(",")),
        ("n_classes", net.n_classes.to_string()),
        ("whitening_method", net.whitening.method.name().into()),
        ("ns_iterations", net.whitening.iterations.to_string()),
        ("whitening_eps", net.whitening.eps.to_string()),
        ("whitening_momentum", net.whitening.momentum.to_string()),
        ("whitening_mode", mode.into()),
        ("whitening_updates", updates.to_string()),
        ("gate", gate.into()),
        ("gate_ratio", ratio.to_string()),
        ("p", t.p.to_string()),
        ("k", t.k.to_string()),
        ("epochs", t.epochs.to_string()),
        ("lr0", t.lr0.to_string()),
        ("lr_decay_every", t.lr_decay_every.to_string()),
        ("lr_decay_factor", t.lr_decay_factor.to_string()),
        ("adam_beta1", t.adam_beta1.to_string()),
        ("adam_beta2", t.adam_beta2.to_string()),
        ("adam_eps", t.adam_eps.to_string()),
        ("seed", t.seed.to_string()),
        ("epoch", ck.epoch.to_string()),
        ("adam_t", ck.adam.t.to_string()),
        ("rng_seed", ck.rng.seed.to_string()),
        ("rng_stream", ck.rng.stream.to_string()),
        ("rng_word_pos", ck.rng.word_pos.to_string()),
    ]
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let params = ck.network.params();
    let mut tensors: Vec<(String, &Matrix)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    let mean;
    if let Some(w) = ck.network.whitening() {
        mean = Matrix::from_vec(1, w.running_mean.len(), w.running_mean.clone()).expect("vector shape");
        tensors.push(("whitening.running_mean".into(), &mean));
        tensors.push(("whitening.running_cov".into(), &w.running_cov));
    }
    for (p, m) in params.iter().zip(&ck.adam.m) {
        tensors.push((format!("adam.m.{}", p.name), m));
    }
    for (p, v) in params.iter().zip(&ck.adam.v) {
        tensors.push((format!("adam.v.{}", p.name), v));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, tensors.len() as u32);
    for (name, m) in &tensors {
        put_tensor(&mut buf, name, m);
    }
    let kv = entries(ck);
    put_u32(&mut buf, kv.len() as u32);
    for (k, v) in &kv {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> CliError {
        CliError::Validation(format!("{}: corrupt checkpoint at byte {}: {}", self.source, self.pos, msg.into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("needs {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Matrix)> {
        let name = self.string()?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows.checked_mul(cols).filter(|c| c.checked_mul(8).is_some()).ok_or_else(|| self.fail("tensor too large"))?;
        let raw = self.take(count * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Matrix::from_vec(rows, cols, data)?))
    }
}

struct Entries<'a> {
    map: BTreeMap<String, String>,
    source: &'a str,
}

impl Entries<'_> {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .map
            .get(key)
            .ok_or_else(|| CliError::Validation(format!("{}: checkpoint lacks entry `{key}`", self.source)))?;
        raw.parse()
            .map_err(|_| CliError::Validation(format!("{}: checkpoint entry `{key}` = `{raw}` is malformed", self.source)))
    }

    fn text(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Validation(format!("{}: checkpoint lacks entry `{key}`", self.source)))
    }
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0, source };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(c.fail("bad magic, not a divnorm checkpoint"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(c.fail(format!("unsupported format version {version}")));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..c.u32()? {
        let (name, m) = c.tensor()?;
        tensors.insert(name, m);
    }
    let mut map = BTreeMap::new();
    for _ in 0..c.u32()? {
        let k = c.string()?;
        let v = c.string()?;
        map.insert(k, v);
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes"));
    }
    let e = Entries { map, source };
    let bad = |key: &str, v: &str| CliError::Validation(format!("{source}: checkpoint entry `{key}` = `{v}` is unknown"));

    let kind = ModelKind::parse(e.text("model")?).ok_or_else(|| bad("model", e.text("model").unwrap_or("")))?;
    let method = WhiteningMethod::parse(e.text("whitening_method")?)
        .ok_or_else(|| bad("whitening_method", e.text("whitening_method").unwrap_or("")))?;
    let gate = match e.text("gate")? {
        "single" => GateVariant::Single,
        "reduced" => GateVariant::Reduced { ratio: e.get("gate_ratio")? },
        other => return Err(bad("gate", other)),
    };
    let hidden_text = e.text("hidden")?;
    let hidden = if hidden_text.is_empty() {
        Vec::new()
    } else {
        hidden_text.split(',').map(|h| h.parse().map_err(|_| bad("hidden", hidden_text))).collect::<Result<_>>()?
    };
    let net_config = NetworkConfig {
        kind,
        input_dim: e.get("input_dim")?,
        feature_dim: e.get("feature_dim")?,
        hidden,
        n_classes: e.get("n_classes")?,
        whitening: WhiteningConfig {
            method,
            iterations: e.get("ns_iterations")?,
            eps: e.get("whitening_eps")?,
            momentum: e.get("whitening_momentum")?,
        },
        gate,
    };
    let config = TrainConfig {
        p: e.get("p")?,
        k: e.get("k")?,
        epochs: e.get("epochs")?,
        lr0: e.get("lr0")?,
        lr_decay_every: e.get("lr_decay_every")?,
        lr_decay_factor: e.get("lr_decay_factor")?,
        adam_beta1: e.get("adam_beta1")?,
        adam_beta2: e.get("adam_beta2")?,
        adam_eps: e.get("adam_eps")?,
        seed: e.get("seed")?,
    };

    let mut network = Network::new(net_config, &mut SeededRng::new(0))?;
    let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
        let m = tensors
            .remove(name)
            .ok_or_else(|| CliError::Validation(format!("{source}: checkpoint lacks tensor `{name}`")))?;
        if m.shape() != shape {
            return Err(CliError::Validation(format!(
                "{source}: tensor `{name}` is {:?}, expected {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in network.params_mut() {
        let shape = p.value.shape();
        p.value = take(&p.name, shape)?;
        m.push(take(&format!("adam.m.{}", p.name), shape)?);
        v.push(take(&format!("adam.v.{}", p.name), shape)?);
    }
    let updates: u64 = e.get("whitening_updates")?;
    let mode = match e.text("whitening_mode")? {
        "train" => Mode::Train,
        "eval" => Mode::Eval,
        other => return Err(bad("whitening_mode", other)),
    };
    if let Some(w) = network.whitening_mut() {
        let d = w.dim();
        w.running_mean = take("whitening.running_mean", (1, d))?.into_vec();
        w.running_cov = take("whitening.running_cov", (d, d))?;
        w.updates = updates;
        w.mode = mode;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CliError::Validation(format!("{source}: unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        network,
        adam: AdamState { t: e.get("adam_t")?, m, v },
        config,
        epoch: e.get("epoch")?,
        rng: RngState { seed: e.get("rng_seed")?, stream: e.get("rng_stream")?, word_pos: e.get("rng_word_pos")? },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ck)).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use divnorm_core::synth::{generate, SynthConfig};
    use divnorm_core::trainer::{training_set, Trainer};

    fn trained(kind: ModelKind, gate: GateVariant) -> (Checkpoint, Matrix, Vec<usize>) {
        let ds = generate(&SynthConfig { n_ids: 8, seed: 2, ..SynthConfig::default() }).unwrap();
        let (x, labels) = training_set(&ds).unwrap();
        let mut net = NetworkConfig::new(kind, 32, 6, 8);
        net.gate = gate;
        net.hidden = vec![10];
        let cfg = TrainConfig { p: 4, k: 4, epochs: 3, seed: 5, ..TrainConfig::default() };
        let mut t = Trainer::start(net, cfg, &x, &labels).unwrap();
        t.run_until(2).unwrap();
        (t.checkpoint, x, labels)
    }

    #[test]
    fn encode_decode_is_identity() {
        for (kind, gate) in [
            (ModelKind::DiverseNorm, GateVariant::Single),
            (ModelKind::DiverseNorm, GateVariant::Reduced { ratio: 2 }),
            (ModelKind::Baseline, GateVariant::Single),
        ] {
            let (mut ck, _, _) = trained(kind, gate);
            ck.network.zero_grad();
            let bytes = encode(&ck);
            assert_eq!(&bytes[..7], b"DIVNORM");
            assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), FORMAT_VERSION);
            assert_eq!(decode(&bytes, "mem").unwrap(), ck);
        }
    }

    #[test]
    fn resumed_step_is_bit_exact() {
        let (ck, x, labels) = trained(ModelKind::DiverseNorm, GateVariant::Single);
        let reloaded = decode(&encode(&ck), "mem").unwrap();
        let mut a = Trainer::new(ck, &x, &labels).unwrap();
        let mut b = Trainer::new(reloaded, &x, &labels).unwrap();
        a.run_epoch().unwrap();
        b.run_epoch().unwrap();
        assert_eq!(encode(&a.checkpoint), encode(&b.checkpoint));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (ck, _, _) = trained(ModelKind::Baseline, GateVariant::Single);
        let bytes = encode(&ck);
        assert!(decode(&bytes[..bytes.len() - 1], "m").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, "m").unwrap_err().to_string().contains("magic"));
        let mut version = bytes;
        version[7] = 9;
        assert!(decode(&version, "m").unwrap_err().to_string().contains("version"));
    }
}

//! Synthetic cloth-changing datasets built from controlled latent factors.
//!
//! Every identity owns a latent vector, every outfit owns another, and each
//! observation mixes the two through a fixed linear map plus Gaussian noise.
//! Per-sample occlusion switches either factor off, which produces samples
//! where only clothing (or only identity) is informative.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub person_id: u64,
    /// Unique across the whole dataset; each outfit belongs to one person.
    pub clothes_id: u64,
    pub camera_id: u64,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    /// Gaussian map with entries of variance `1/d_obs`.
    Random,
    /// Identity latents in the first `d_id` coordinates, clothing latents in
    /// the next `d_c`, zeros elsewhere.
    Embedding,
}

impl Mixing {
    pub fn name(self) -> &'static str {
        match self {
            Mixing::Random => "random",
            Mixing::Embedding => "embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Mixing::Random),
            "embedding" => Some(Mixing::Embedding),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub outfits_per_id: usize,
    pub samples_per_outfit: usize,
    pub n_cameras: usize,
    pub d_id: usize,
    pub d_c: usize,
    pub d_obs: usize,
    pub noise_std: f64,
    pub id_occlusion_rate: f64,
    pub clothes_occlusion_rate: f64,
    pub seed: u64,
    pub mixing: Mixing,
    /// Scale of the clothing columns of the mixing map relative to identity.
    pub clothes_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 50,
            outfits_per_id: 5,
            samples_per_outfit: 8,
            n_cameras: 4,
            d_id: 8,
            d_c: 8,
            d_obs: 32,
            noise_std: 0.3,
            id_occlusion_rate: 0.2,
            clothes_occlusion_rate: 0.2,
            seed: 0,
            mixing: Mixing::Random,
            clothes_gain: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.outfits_per_id < 2 {
            return fail(alloc::format!(
                "outfits_per_id = {} but query and gallery each need their own outfit",
                self.outfits_per_id
            ));
        }
        if self.n_ids == 0 || self.samples_per_outfit == 0 || self.n_cameras == 0 {
            return fail("n_ids, samples_per_outfit and n_cameras must be positive".into());
        }
        if self.d_obs < self.d_id + self.d_c {
            return fail(alloc::format!("d_obs = {} < d_id + d_c = {}", self.d_obs, self.d_id + self.d_c));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(alloc::format!("noise_std = {}", self.noise_std));
        }
        for (name, p) in [("id_occlusion_rate", self.id_occlusion_rate), ("clothes_occlusion_rate", self.clothes_occlusion_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(alloc::format!("{name} = {p} is not a probability"));
            }
        }
        if !self.clothes_gain.is_finite() {
            return fail(alloc::format!("clothes_gain = {}", self.clothes_gain));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_ids * self.outfits_per_id * self.samples_per_outfit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(SynthConfig),
    Ingested(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub meta: Vec<SampleMeta>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(features: Matrix, meta: Vec<SampleMeta>, provenance: Provenance) -> Result<Self> {
        contract!(features.rows() == meta.len(), "{} feature rows for {} metadata rows", features.rows(), meta.len());
        let mut owner = BTreeMap::new();
        for m in &meta {
            if let Some(&p) = owner.get(&m.clothes_id) {
                contract!(p == m.person_id, "clothes_id {} is worn by persons {p} and {}", m.clothes_id, m.person_id);
            } else {
                owner.insert(m.clothes_id, m.person_id);
            }
        }
        Ok(Self { features, meta, provenance })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.meta[i].split == split).collect()
    }

    /// Rows `indices` in order, with metadata.
    pub fn subset(&self, indices: &[usize]) -> (Matrix, Vec<SampleMeta>) {
        (self.features.select_rows(indices), indices.iter().map(|&i| self.meta[i]).collect())
    }

    /// Dense class labels for the training split: sorted train person ids map to `0..C`.
    pub fn train_label_map(&self) -> BTreeMap<u64, usize> {
        let mut ids: Vec<u64> = self.meta.iter().filter(|m| m.split == Split::Train).map(|m| m.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(label, id)| (id, label)).collect()
    }
}

fn mixing_map(config: &SynthConfig) -> Matrix {
    let (d_id, d_c, d_obs) = (config.d_id, config.d_c, config.d_obs);
    match config.mixing {
        Mixing::Embedding => Matrix::from_fn(d_obs, d_id + d_c, |i, j| match (i == j, j < d_id) {
            (true, true) => 1.0,
            (true, false) => config.clothes_gain,
            _ => 0.0,
        }),
        Mixing::Random => {
            let mut rng = SeededRng::with_stream(config.seed, 0);
            let scale = 1.0 / libm::sqrt(d_obs as f64);
            let mut a = Matrix::from_fn(d_obs, d_id + d_c, |_, _| rng.normal() * scale);
            for i in 0..d_obs {
                for j in d_id..d_id + d_c {
                    a.row_mut(i)[j] *= config.clothes_gain;
                }
            }
            a
        }
    }
}

/// Deterministic in `config`. Per identity, outfit 0 is the gallery, outfit 1
/// the query set and the remaining outfits are training data; cameras are
/// assigned round-robin over each identity's samples.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let a = mixing_map(config);
    let (d_id, d_c, d_obs) = (config.d_id, config.d_c, config.d_obs);
    let mut latents = SeededRng::with_stream(config.seed, 1);
    let mut occlusion = SeededRng::with_stream(config.seed, 2);
    let mut noise = SeededRng::with_stream(config.seed, 3);

    let n = config.n_samples();
    let mut data = Vec::with_capacity(n * d_obs);
    let mut meta = Vec::with_capacity(n);
    let mut z = alloc::vec![0.0; d_id + d_c];
    for person in 0..config.n_ids {
        let z_id: Vec<f64> = (0..d_id).map(|_| latents.normal()).collect();
        for outfit in 0..config.outfits_per_id {
            let z_c: Vec<f64> = (0..d_c).map(|_| latents.normal()).collect();
            let split = match outfit {
                0 => Split::Gallery,
                1 => Split::Query,
                _ => Split::Train,
            };
            for s in 0..config.samples_per_outfit {
                let hide_id = occlusion.bernoulli(config.id_occlusion_rate);
                let hide_c = occlusion.bernoulli(config.clothes_occlusion_rate);
                for (k, v) in z_id.iter().enumerate() {
                    z[k] = if hide_id { 0.0 } else { *v };
                }
                for (k, v) in z_c.iter().enumerate() {
                    z[d_id + k] = if hide_c { 0.0 } else { *v };
                }
                for i in 0..d_obs {
                    let mixed: f64 = a.row(i).iter().zip(&z).map(|(p, q)| p * q).sum();
                    data.push(mixed + config.noise_std * noise.normal());
                }
                let within = outfit * config.samples_per_outfit + s;
                meta.push(SampleMeta {
                    sample_id: meta.len() as u64,
                    person_id: person as u64,
                    clothes_id: (person * config.outfits_per_id + outfit) as u64,
                    camera_id: (within % config.n_cameras) as u64,
                    split,
                });
            }
        }
    }
    Dataset::new(Matrix::from_vec(n, d_obs, data)?, meta, Provenance::Synthetic(*config))
}

/// Keeps `ceil(keep_fraction · m)` (at least one) of each identity's `m`
/// training outfits, chosen by a seeded shuffle. Query and gallery samples
/// are never touched; sample ids are preserved.
pub fn drop_outfits(ds: &Dataset, keep_fraction: f64, seed: u64) -> Result<Dataset> {
    contract!(keep_fraction > 0.0 && keep_fraction <= 1.0, "keep_fraction {keep_fraction} outside (0, 1]");
    let mut outfits: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for m in ds.meta.iter().filter(|m| m.split == Split::Train) {
        let list = outfits.entry(m.person_id).or_default();
        if !list.contains(&m.clothes_id) {
            list.push(m.clothes_id);
        }
    }
    let mut rng = SeededRng::with_stream(seed, 4);
    let mut kept = alloc::collections::BTreeSet::new();
    for list in outfits.values_mut() {
        list.sort_unstable();
        let keep = (libm::ceil(keep_fraction * list.len() as f64) as usize).clamp(1, list.len());
        rng.shuffle(list);
        kept.extend(list[..keep].iter().copied());
    }
    let rows: Vec<usize> =
        (0..ds.len()).filter(|&i| ds.meta[i].split != Split::Train || kept.contains(&ds.meta[i].clothes_id)).collect();
    let (features, meta) = ds.subset(&rows);
    Ok(Dataset { features, meta, provenance: ds.provenance.clone() })
}

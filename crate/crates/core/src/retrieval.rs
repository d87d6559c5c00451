//! Query/gallery scoring over the two branch embeddings, protocol masks and
//! mAP/CMC.

use alloc::vec::Vec;

use crate::diverse_norm::Network;
use crate::error::{contract, Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::synth::{Dataset, SampleMeta, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    General,
    SameClothes,
    ClothesChanging,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::General, Protocol::SameClothes, Protocol::ClothesChanging];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::General => "general",
            Protocol::SameClothes => "sc",
            Protocol::ClothesChanging => "cc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    /// Mean of the per-branch cosines.
    SimSum,
    /// Cosine of the summed branch embeddings.
    FeatSum,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::SimSum, Strategy::FeatSum];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SimSum => "sim_sum",
            Strategy::FeatSum => "feat_sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOutcome {
    ValidMatch,
    ValidNonmatch,
    Excluded,
}

pub fn protocol_mask(q: &SampleMeta, g: &SampleMeta, protocol: Protocol) -> MaskOutcome {
    if q.person_id != g.person_id {
        return MaskOutcome::ValidNonmatch;
    }
    let same_camera = q.camera_id == g.camera_id;
    let same_clothes = q.clothes_id == g.clothes_id;
    let excluded = match protocol {
        Protocol::General => same_camera,
        Protocol::ClothesChanging => same_camera || same_clothes,
        Protocol::SameClothes => same_camera || !same_clothes,
    };
    if excluded {
        MaskOutcome::Excluded
    } else {
        MaskOutcome::ValidMatch
    }
}

/// Identity and clothing embeddings plus metadata for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatureStore {
    pub h_id: Matrix,
    pub h_c: Matrix,
    pub meta: Vec<SampleMeta>,
}

impl BranchFeatureStore {
    pub fn new(h_id: Matrix, h_c: Matrix, meta: Vec<SampleMeta>) -> Result<Self> {
        contract!(h_id.shape() == h_c.shape(), "branch shapes {:?} and {:?} differ", h_id.shape(), h_c.shape());
        contract!(h_id.rows() == meta.len(), "{} embeddings for {} samples", h_id.rows(), meta.len());
        if !h_id.all_finite() || !h_c.all_finite() {
            return Err(Error::InvalidInput("non-finite branch embedding".into()));
        }
        Ok(Self { h_id, h_c, meta })
    }

    /// Runs the frozen network in eval mode over `features`.
    pub fn from_network(network: &Network, features: &Matrix, meta: Vec<SampleMeta>) -> Result<Self> {
        let e = network.branch_embeddings(features)?;
        Self::new(e.h_id, e.h_c, meta)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

/// A similarity value and whether a zero-norm vector forced a cosine to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return (0.0, true);
    }
    ((dot(a, b) / denom).clamp(-1.0, 1.0), false)
}

pub fn branch_similarity(q_id: &[f64], q_c: &[f64], g_id: &[f64], g_c: &[f64], strategy: Strategy) -> Similarity {
    match strategy {
        Strategy::SimSum => {
            let (a, da) = cosine(q_id, g_id);
            let (b, db) = cosine(q_c, g_c);
            Similarity { value: 0.5 * (a + b), degenerate: da || db }
        }
        Strategy::FeatSum => {
            let q: Vec<f64> = q_id.iter().zip(q_c).map(|(a, b)| a + b).collect();
            let g: Vec<f64> = g_id.iter().zip(g_c).map(|(a, b)| a + b).collect();
            let (v, d) = cosine(&q, &g);
            Similarity { value: v, degenerate: d }
        }
    }
}

/// One gallery entry as seen from a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub score: f64,
    pub sample_id: u64,
    pub outcome: MaskOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    pub average_precision: f64,
    /// 1-based rank of the first valid match among non-excluded entries.
    pub first_match_rank: usize,
}

/// Ranks by descending score, ties by ascending `sample_id`, after dropping
/// excluded entries. `None` when no valid match survives the mask.
pub fn rank_query(candidates: &[Candidate]) -> Option<QueryResult> {
    let mut ranked: Vec<&Candidate> = candidates.iter().filter(|c| c.outcome != MaskOutcome::Excluded).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    let relevant = ranked.iter().filter(|c| c.outcome == MaskOutcome::ValidMatch).count();
    if relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = 0usize;
    for (pos, c) in ranked.iter().enumerate() {
        if c.outcome == MaskOutcome::ValidMatch {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            if first == 0 {
                first = pos + 1;
            }
        }
    }
    Some(QueryResult { average_precision: precision_sum / relevant as f64, first_match_rank: first })
}

/// `(mAP, cmc)` over evaluated queries; `cmc[k-1]` is the rank-k accuracy for
/// `k` in `1..=max_rank`. Both are 0 when nothing was evaluated.
pub fn rank_metrics(results: &[QueryResult], max_rank: usize) -> (f64, Vec<f64>) {
    if results.is_empty() {
        return (0.0, alloc::vec![0.0; max_rank]);
    }
    let n = results.len() as f64;
    let map = results.iter().map(|r| r.average_precision).sum::<f64>() / n;
    let cmc = (1..=max_rank).map(|k| results.iter().filter(|r| r.first_match_rank <= k).count() as f64 / n).collect();
    (map, cmc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerQuery {
    pub query_sample_id: u64,
    pub result: QueryResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub strategy: Strategy,
    pub map: f64,
    /// Rank-k accuracy for `k = 1..=gallery size`.
    pub cmc: Vec<f64>,
    pub n_queries: usize,
    /// Queries without any valid match after masking.
    pub skipped: usize,
    /// Query/gallery pairs where a zero-norm embedding made a cosine 0.
    pub degenerate_pairs: usize,
    pub per_query: Vec<PerQuery>,
}

impl EvalReport {
    /// Rank-k accuracy; ranks past the gallery size saturate.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            len => self.cmc[k.clamp(1, len) - 1],
        }
    }
}

pub fn evaluate_stores(
    query: &BranchFeatureStore,
    gallery: &BranchFeatureStore,
    protocol: Protocol,
    strategy: Strategy,
) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Config("query and gallery sets must both be nonempty".into()));
    }
    contract!(query.h_id.cols() == gallery.h_id.cols(), "query and gallery embedding widths differ");
    let mut per_query = Vec::new();
    let mut skipped = 0;
    let mut degenerate_pairs = 0;
    let mut candidates = Vec::with_capacity(gallery.len());
    for qi in 0..query.len() {
        candidates.clear();
        for gi in 0..gallery.len() {
            let outcome = protocol_mask(&query.meta[qi], &gallery.meta[gi], protocol);
            let s = branch_similarity(
                query.h_id.row(qi),
                query.h_c.row(qi),
                gallery.h_id.row(gi),
                gallery.h_c.row(gi),
                strategy,
            );
            degenerate_pairs += s.degenerate as usize;
            candidates.push(Candidate { score: s.value, sample_id: gallery.meta[gi].sample_id, outcome });
        }
        match rank_query(&candidates) {
            Some(result) => per_query.push(PerQuery { query_sample_id: query.meta[qi].sample_id, result }),
            None => skipped += 1,
        }
    }
    let results: Vec<QueryResult> = per_query.iter().map(|p| p.result).collect();
    let (map, cmc) = rank_metrics(&results, gallery.len());
    Ok(EvalReport { protocol, strategy, map, cmc, n_queries: per_query.len(), skipped, degenerate_pairs, per_query })
}

/// Query and gallery stores for `ds` under a frozen network.
pub fn build_stores(network: &Network, ds: &Dataset) -> Result<(BranchFeatureStore, BranchFeatureStore)> {
    let store = |split: Split| -> Result<BranchFeatureStore> {
        let rows = ds.indices(split);
        if rows.is_empty() {
            return Err(Error::Config(alloc::format!("dataset has no {} samples", split.name())));
        }
        let (x, meta) = ds.subset(&rows);
        BranchFeatureStore::from_network(network, &x, meta)
    };
    Ok((store(Split::Query)?, store(Split::Gallery)?))
}

pub fn evaluate(network: &Network, ds: &Dataset, protocol: Protocol, strategy: Strategy) -> Result<EvalReport> {
    let (q, g) = build_stores(network, ds)?;
    evaluate_stores(&q, &g, protocol, strategy)
}

//! The Diverse Norm block: whitening, channel-attention gating, the
//! identity/clothing split, relative-difficulty re-weighting and the
//! dual-branch training loss.

mod gate;
mod network;
mod reweight;
mod whitening;

pub use gate::{attention_gate, split_backward, split_features, GateCache, GateParams, GateVariant};
pub use network::{
    Backbone, BranchEmbeddings, DiverseNormBlock, ForwardCache, Head, LossOutput, ModelKind, Network,
    NetworkConfig, StepStats, Weighting,
};
pub use reweight::{reweight_scores, ReweightScores};
pub use whitening::{BatchStats, Mode, WhitenCache, Whitener, WhiteningConfig, WhiteningMethod, WhiteningState};

use crate::error::Result;
use crate::numerics::Matrix;

/// Whitens `x` according to `state.mode`; see [`WhiteningState::whiten`].
/// The returned cache feeds [`WhiteningState::backward`].
pub fn whiten(x: &Matrix, state: &mut WhiteningState) -> Result<(Matrix, WhitenCache)> {
    state.whiten(x)
}

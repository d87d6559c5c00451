//! Relative-difficulty sample weights.
//!
//! The identity-branch weight is the anchor and is always 1. The clothing
//! score `2·L_c / (L_id + L_c)` grows when the clothing branch struggles on a
//! sample and is applied to the identity branch's loss, so the identity
//! classifier concentrates on samples whose clothing is uninformative.
//! Scores are plain numbers: no gradient flows through them.

use alloc::vec::Vec;

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightScores {
    /// Anchor weights, all exactly 1.
    pub w_id: Vec<f64>,
    /// Relative difficulty of the clothing branch, in `[0, 2]`.
    pub w_c: Vec<f64>,
}

impl ReweightScores {
    pub fn mean_w_c(&self) -> f64 {
        if self.w_c.is_empty() {
            return 1.0;
        }
        self.w_c.iter().sum::<f64>() / self.w_c.len() as f64
    }
}

pub fn reweight_scores(loss_id: &[f64], loss_c: &[f64]) -> Result<ReweightScores> {
    contract!(loss_id.len() == loss_c.len(), "{} identity losses vs {} clothing losses", loss_id.len(), loss_c.len());
    let mut w_c = Vec::with_capacity(loss_c.len());
    for (i, (&li, &lc)) in loss_id.iter().zip(loss_c).enumerate() {
        contract!(li >= 0.0 && lc >= 0.0, "negative loss at sample {i}: ({li}, {lc})");
        let denom = li + lc;
        // both branches perfect: neither is harder
        let w = if denom == 0.0 { 1.0 } else { (2.0 * lc / denom).min(2.0) };
        w_c.push(w);
    }
    Ok(ReweightScores { w_id: alloc::vec![1.0; loss_id.len()], w_c })
}

//! Feature whitening, channel-attention branch splitting, relative-difficulty
//! sample re-weighting and per-branch retrieval evaluation for cloth-changing
//! person re-identification.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the experiment
//! configuration and the command line live in the companion `divnorm` crate.
//!
//! Layout:
//! - [`numerics`]: dense matrices, covariance, inverse square roots, the seeded
//!   generator and finite differences.
//! - [`diffnet`]: the handful of layers the model needs, each with a hand-written
//!   backward pass.
//! - [`diverse_norm`]: whitening, the attention gate, the identity/clothing
//!   split, re-weighting and the dual-branch loss.
//! - [`synth`]: synthetic cloth-changing datasets with controlled latent factors.
//! - [`trainer`]: identity-balanced batches, Adam, the learning-rate schedule and
//!   checkpoint state.
//! - [`retrieval`]: query/gallery scoring, protocol masks, mAP and CMC.
//! - [`gradcheck`]: the finite-difference suite over every layer and the full loss.

#![no_std]
#[cfg(test)]
extern crate std;
extern crate alloc;

pub mod diffnet;
pub mod diverse_norm;
pub mod error;
pub mod gradcheck;
pub mod numerics;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};

//! File formats and the experiment command line for `divnorm-core`.
//!
//! - [`dataset`]: the dataset CSV.
//! - [`checkpoint`]: the binary checkpoint.
//! - [`reports`]: training log, evaluation and ablation CSVs.
//! - [`config`]: the flat `key = value` experiment configuration.
//! - [`manifest`]: per-command manifests that `rerun` replays.
//! - [`cli`]: subcommands and exit codes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod reports;

pub use error::{CliError, Result};

//! Experiment harness for the three-party federated data market.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

pub use config::{ConfigError, ExperimentConfig};
pub use error::HarnessError;

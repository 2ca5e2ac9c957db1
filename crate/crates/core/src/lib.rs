//! Tripartite Stackelberg incentive mechanism for resource-decoupled federated
//! learning.
//!
//! A model owner (leader) sets a total payment `eta`, data owners (sub-leaders)
//! choose how much quality-weighted data to contribute, and computing centers
//! (followers) choose how much data to undertake. The crate computes the
//! closed-form Stackelberg–Nash equilibrium by backward induction, matches data
//! owners to computing centers with deferred acceptance, and runs a simulated
//! federated training loop that re-estimates data quality from loss deltas and
//! re-solves the game mid-run.
//!
//! Modules:
//! - [`market`]: domain types and the three utility functions.
//! - [`equilibrium`]: closed-form solver and grid-deviation verifier.
//! - [`matching`]: preference tables, Gale–Shapley, stability check.
//! - [`training`]: synthetic owner datasets, trainers, aggregation, FL loop.
//! - [`dynamics`]: quality assessment, mid-run re-solve, payment ledger.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod market;
pub mod matching;
pub mod training;

pub use error::{Error, Result};
pub use market::{ComputeCenter, DataOwner, MarketParams, StrategyProfile, UtilityReport};

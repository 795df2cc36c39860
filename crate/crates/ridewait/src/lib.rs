//! Passenger waiting-time prediction for ridesharing trip data.
//!
//! The pipeline ingests trip records, engineers base and interaction
//! features for two prediction tasks (pre-request, before a driver is
//! assigned, and post-request, after assignment), trains a regularized
//! gradient-boosted tree ensemble, and evaluates it against a linear
//! baseline and a no-interaction ablation.

pub mod config;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod features;
pub mod gbt;
pub mod interactions;
pub mod pipeline;
pub mod synth;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trip;

pub use error::{Error, Result};

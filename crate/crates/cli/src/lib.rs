//! Experiment runner for `knode-mpc`: collects data with nominal MPC, trains
//! and blends KNODE ensembles, certifies terminal ingredients, evaluates
//! prediction and closed-loop tracking, and exports tables.

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod seeds;
pub mod stats;

pub use config::RunConfig;
pub use pipeline::{RunError, RunResult};

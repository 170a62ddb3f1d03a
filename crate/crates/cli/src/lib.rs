//! Batch driver for robust byproduct-gas scheduling: forecasting supply
//! intervals, solving the two-stage robust schedule, parameter sweeps and
//! Monte Carlo evaluation, each configured by one JSON file.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod report;

pub use commands::{execute, Command, RunOptions};
pub use config::RunConfig;
pub use error::CliError;
pub use report::RunReport;

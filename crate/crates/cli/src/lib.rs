//! Configuration-driven experiments on top of `pdfevo`: grid solves, Monte
//! Carlo runs, run comparison and the transition-matrix benchmark, each
//! writing versioned CSV files and a JSON summary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{run_compare, run_mc, run_propagator_bench, run_solve, CliError};
pub use config::{ConfigError, RunConfig};

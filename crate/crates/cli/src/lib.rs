//! Experiment driver for the test-time batch-norm adaptation laboratory:
//! configuration, the scenario grid, report files, and the `ttnlab` CLI.

pub mod config;
pub mod grid;
pub mod report;

mod cli;
pub use cli::cli_main;

//! Experiment orchestration on top of `rss-core`: configuration files, grid
//! sweeps, run records and report tables.

pub mod commands;
pub mod config;
pub mod grid;
pub mod records;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use records::Precision;

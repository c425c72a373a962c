//! Experiment runner, run records, rank statistics and export.

pub mod experiment;
pub mod export;
pub mod record;
pub mod stats;

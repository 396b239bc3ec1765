//! Experiment configuration, sweeps and CSV reports.

pub mod config;
pub mod sweep;

pub use config::{ExperimentConfig, CONFIG_KEYS};
pub use sweep::{
    compare_vatp, prompt_for_seed, run_cells, run_compare, run_sweep, CellResult, CompareReport,
    ComparisonRow, ExperimentReport,
};

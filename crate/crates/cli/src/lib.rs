//! Experiment runner for the mean-field control solvers: configuration
//! files, training orchestration, oracle checks and results tables.

pub mod config;
pub mod experiment;
pub mod oracle;
pub mod table;

pub use config::{ExperimentConfig, ProblemConfig};
pub use experiment::{run_experiment, ExperimentError};
pub use table::emit_table;

//! Monte-Carlo experiments, reporting and the command-line front end.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{convergence_trace, run_experiment, ExperimentResult};

//! Experiment harness: dataset generation, pretraining, unlearning with any
//! method, evaluation, oracle verification and ablation sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use io::Layout;
pub use pipeline::{Experiment, SweepAxis, SweepRow, UnlearnOutcome};

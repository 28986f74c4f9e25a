//! Configuration, experiment runner and error reporting behind the `spinflux` binary.

pub mod config;
pub mod experiment;
pub mod failure;

pub use config::{Experiment, ExperimentConfig, ExperimentKind, Overrides, Violation};
pub use failure::Failure;

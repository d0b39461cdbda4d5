//! Experiment harness for federated jobs.
//!
//! A [`population::Population`] turns an [`config::ExperimentConfig`] and a
//! seed into simulated devices holding synthetic, partitioned app data. The
//! [`runner`] drives a job with them through a [`transport::Transport`],
//! either straight into an in-process coordinator or over HTTP, and writes
//! metrics and model histories. [`compare`] contrasts two configs over
//! paired seeds.

pub mod compare;
pub mod config;
pub mod device;
pub mod error;
pub mod population;
pub mod report;
pub mod runner;
pub mod transport;

pub use compare::{compare_scenarios, CompareReport};
pub use config::{ExperimentConfig, ExperimentScenario, TransportConfig};
pub use error::SimError;
pub use runner::{run_experiment, run_experiment_with, ExperimentResult};

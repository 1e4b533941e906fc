//! Experiment runner for kernel-flow training.
//!
//! Three experiment families share one seeded, bit-reproducible driver:
//! `swissroll` (standalone kernel learning with a deformation network),
//! `train-cnn` (a digit classifier trained with cross-entropy plus weighted
//! KF losses on tapped inner layers), and `grad-check` (finite-difference
//! verification of the full loss gradients). `compare` runs a config/seed
//! cross product and summarizes final test errors.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, Kind};
pub use runner::{compare, run, CompareRow, MetricsRow, RunRecord};

use kflows::data::DataError;
use kflows::kf::KfError;
use kflows::metrics::MetricsError;
use kflows::nn::NnError;
use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    /// A numerical failure mid-run, tagged with the offending step.
    Training { step: usize, source: String },
    Kf(KfError),
    Network(NnError),
    Metrics(MetricsError),
    Data(DataError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(s) => write!(f, "config: {s}"),
            CliError::Io(s) => write!(f, "io: {s}"),
            CliError::Training { step, source } => {
                write!(f, "training aborted at step {step}: {source}")
            }
            CliError::Kf(e) => write!(f, "{e}"),
            CliError::Network(e) => write!(f, "{e}"),
            CliError::Metrics(e) => write!(f, "{e}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<KfError> for CliError {
    fn from(e: KfError) -> Self {
        CliError::Kf(e)
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Network(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Metrics(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

//! Workloads, fault campaigns and reports for the replication runtime.

pub mod experiment;
pub mod runner;
pub mod workload;

use std::path::PathBuf;

use thiserror::Error;

use ftrep_core::faultinject::FaultError;
use ftrep_core::{LayoutError, RuntimeError};

pub use experiment::{run_experiment, ExperimentConfig, FaultSpec, ReportRow};
pub use runner::{run_workload, RunOptions, WorkloadRun};
pub use workload::{WorkloadKind, WorkloadSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("incarnations of user rank {user} finished with different checksums")]
    Divergence { user: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

//! Workloads, experiment orchestration and metric output.

pub mod experiment;
pub mod scenario;
pub mod sweep;
pub mod workload;

use thiserror::Error;

pub use experiment::{emit_csv, run_experiment, ExperimentResult, ExperimentSpec, Outcome};
pub use scenario::{run_scenario, Scenario, ScenarioResult};
pub use sweep::{dlwa_sweep, stream_dlwa, SweepPoint};
pub use workload::{gen_workload, KeyDistribution, SizeModel, Workload, WorkloadSpec};

use crate::cluster::ClusterError;
use crate::pm::PmError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Pm(#[from] PmError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Deterministic workloads for the admission kernel: specs, generated
//! scripts, lanes and the scenario runner.

use thiserror::Error;
use vgate_core::runtime::RuntimeError;

pub mod generate;
pub mod lanes;
pub mod run;
pub mod script;
pub mod spec;

pub use generate::generate_workload;
pub use lanes::LaneRegistry;
pub use run::{run_scenario, RunManifest, RunOutput};
pub use script::{ScenarioScript, Step, TaskPlan};
pub use spec::{Cohort, Fault, Proportion, WorkloadSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("cohort {0}: {1}")]
    InvalidCohort(String, String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("io: {0}")]
    Io(String),
}

impl From<vgate_core::pgv::PgvError> for SimError {
    fn from(e: vgate_core::pgv::PgvError) -> Self {
        SimError::Runtime(RuntimeError::Pgv(e))
    }
}

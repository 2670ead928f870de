//! Scenario scripts: the fully resolved, serializable run plan.

use serde::{Deserialize, Serialize};
use vgate_core::ledger::Origin;
use vgate_core::packet::Tier;

use crate::spec::{Fault, Padding, ReasonDetail};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub task_id: String,
    pub session_id: String,
    pub cluster_id: String,
    pub origin: Origin,
    pub tier: Tier,
    pub under_pack: bool,
    pub reach_verify: bool,
    pub fault: Option<Fault>,
    pub skip_first: bool,
    pub repeat: bool,
    pub unresolved: bool,
    pub complete: bool,
    pub task_class: String,
    pub diagnostic: bool,
    pub reason_detail: ReasonDetail,
    pub comparable: bool,
}

impl TaskPlan {
    /// verify_completed rows this plan produces.
    pub fn verify_rows(&self) -> u64 {
        if !self.reach_verify {
            0
        } else if self.fault.is_some() {
            if self.unresolved {
                1
            } else {
                2 + self.repeat as u64
            }
        } else {
            1 + self.skip_first as u64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrillExecution {
    Executed,
    Failed,
    Denied,
}

/// A vetoed task that fails verification and goes through the rollback
/// queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrillPlan {
    pub task_id: String,
    pub session_id: String,
    pub cluster_id: String,
    pub tier: Tier,
    pub execution: DrillExecution,
    pub comparable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactPlan {
    pub task_id: String,
    pub session_id: String,
    pub cluster_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Task(TaskPlan),
    Drill(DrillPlan),
    Artifact(ArtifactPlan),
}

impl Step {
    pub fn task_id(&self) -> &str {
        match self {
            Step::Task(t) => &t.task_id,
            Step::Drill(d) => &d.task_id,
            Step::Artifact(a) => &a.task_id,
        }
    }

    pub fn verify_rows(&self) -> u64 {
        match self {
            Step::Task(t) => t.verify_rows(),
            Step::Drill(_) | Step::Artifact(_) => 1,
        }
    }

    pub(crate) fn set_placement(&mut self, session: String, cluster: String) {
        let (s, c) = match self {
            Step::Task(t) => (&mut t.session_id, &mut t.cluster_id),
            Step::Drill(d) => (&mut d.session_id, &mut d.cluster_id),
            Step::Artifact(a) => (&mut a.session_id, &mut a.cluster_id),
        };
        *s = session;
        *c = cluster;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub seed: u64,
    pub slice: Option<String>,
    pub rotate_every: Option<u64>,
    pub padding: Option<Padding>,
    pub steps: Vec<Step>,
}

impl ScenarioScript {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            slice: None,
            rotate_every: None,
            padding: None,
            steps: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scripts always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, crate::SimError> {
        serde_json::from_str(text).map_err(|e| crate::SimError::InvalidSpec(e.to_string()))
    }

    pub fn expected_verify_rows(&self) -> u64 {
        self.steps.iter().map(Step::verify_rows).sum()
    }
}

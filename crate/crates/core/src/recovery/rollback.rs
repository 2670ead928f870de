use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RecoveryError;
use crate::ledger::{EventType, Ledger};
use crate::lifecycle::{next_state, TaskState, Trigger, COORDINATOR_ROLE};
use crate::packet::{PacketStore, RollbackProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackTrigger {
    HighRiskVerificationFailure,
    ChallengeConfirmedInvalidity,
    WeakEvidencePostClaim,
}

impl RollbackTrigger {
    pub const ALL: [RollbackTrigger; 3] = [
        RollbackTrigger::HighRiskVerificationFailure,
        RollbackTrigger::ChallengeConfirmedInvalidity,
        RollbackTrigger::WeakEvidencePostClaim,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RollbackTrigger::HighRiskVerificationFailure => "high_risk_verification_failure",
            RollbackTrigger::ChallengeConfirmedInvalidity => "challenge_confirmed_invalidity",
            RollbackTrigger::WeakEvidencePostClaim => "weak_evidence_post_claim",
        }
    }
}

impl fmt::Display for RollbackTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RollbackTrigger {
    type Err = RecoveryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| RecoveryError::UnknownTrigger(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackStatus {
    PendingReview,
    Approved,
    Denied,
    ExecutedSuccess,
    ExecutedFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackQueueItem {
    pub item_id: String,
    pub task_id: String,
    pub trigger: RollbackTrigger,
    pub status: RollbackStatus,
    pub policy_declared: bool,
    pub reviewer: Option<String>,
    pub enqueued_seq: u64,
    pub reviewed_seq: Option<u64>,
    pub outcome_seq: Option<u64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    Approve,
    Deny,
}

/// Performs an approved rollback. Only reachable through an approved item.
pub trait RollbackExecutor {
    fn execute(&mut self, item: &RollbackQueueItem) -> Result<(), String>;
}

/// Succeeds unless the item's task is listed in `failing`.
#[derive(Debug, Clone, Default)]
pub struct SimulatedExecutor {
    pub failing: BTreeSet<String>,
}

impl RollbackExecutor for SimulatedExecutor {
    fn execute(&mut self, item: &RollbackQueueItem) -> Result<(), String> {
        if self.failing.contains(&item.task_id) {
            Err(format!("simulated rollback failure for {}", item.task_id))
        } else {
            Ok(())
        }
    }
}

/// Advisory rollback items awaiting human review. Nothing here runs on its
/// own; every state change is an explicit call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackQueue {
    items: Vec<RollbackQueueItem>,
}

impl RollbackQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[RollbackQueueItem] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&RollbackQueueItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    fn index(&self, item_id: &str) -> Result<usize, RecoveryError> {
        self.items
            .iter()
            .position(|i| i.item_id == item_id)
            .ok_or_else(|| RecoveryError::UnknownItem(item_id.to_owned()))
    }

    pub fn enqueue(
        &mut self,
        state: &mut TaskState,
        trigger: RollbackTrigger,
        store: &PacketStore,
        ledger: &mut Ledger,
    ) -> Result<RollbackQueueItem, RecoveryError> {
        next_state(state.branch, Trigger::plain(EventType::RollbackEnqueued))?;
        let item_id = format!("RB-{:04}", self.items.len() + 1);
        let policy_declared = store
            .pack_for_task(&state.task_id)
            .is_some_and(|p| p.rollback_profile == RollbackProfile::Declared);
        let mut ev = state.event(ledger, EventType::RollbackEnqueued, COORDINATOR_ROLE);
        ev.detail = Some(format!("{item_id} {trigger}"));
        let seq = state.emit(ledger, ev)?;
        let item = RollbackQueueItem {
            item_id,
            task_id: state.task_id.clone(),
            trigger,
            status: RollbackStatus::PendingReview,
            policy_declared,
            reviewer: None,
            enqueued_seq: seq,
            reviewed_seq: None,
            outcome_seq: None,
            failure: None,
        };
        self.items.push(item.clone());
        Ok(item)
    }

    /// Records the review. Denial is final for the item; approval executes
    /// immediately through `executor`.
    pub fn review(
        &mut self,
        item_id: &str,
        reviewer: &str,
        decision: ReviewDecision,
        executor: &mut dyn RollbackExecutor,
        state: &mut TaskState,
        ledger: &mut Ledger,
    ) -> Result<RollbackQueueItem, RecoveryError> {
        let idx = self.index(item_id)?;
        if self.items[idx].status != RollbackStatus::PendingReview {
            return Err(RecoveryError::NotPending(item_id.to_owned()));
        }
        if reviewer.trim().is_empty() {
            return Err(RecoveryError::MissingReviewer);
        }
        let verdict = match decision {
            ReviewDecision::Approve => "approve",
            ReviewDecision::Deny => "deny",
        };
        let mut ev = state.event(ledger, EventType::RollbackReviewed, reviewer);
        ev.detail = Some(format!("{item_id} {verdict}"));
        let seq = state.emit(ledger, ev)?;
        let item = &mut self.items[idx];
        item.reviewer = Some(reviewer.to_owned());
        item.reviewed_seq = Some(seq);
        match decision {
            ReviewDecision::Deny => {
                item.status = RollbackStatus::Denied;
                let mut ev = state.event(ledger, EventType::RollbackDenied, reviewer);
                ev.detail = Some(item_id.to_owned());
                let seq = state.emit(ledger, ev)?;
                self.items[idx].outcome_seq = Some(seq);
                Ok(self.items[idx].clone())
            }
            ReviewDecision::Approve => {
                item.status = RollbackStatus::Approved;
                self.execute(item_id, executor, state, ledger)
            }
        }
    }

    /// Runs an approved item once. Failure is logged and final.
    pub fn execute(
        &mut self,
        item_id: &str,
        executor: &mut dyn RollbackExecutor,
        state: &mut TaskState,
        ledger: &mut Ledger,
    ) -> Result<RollbackQueueItem, RecoveryError> {
        let idx = self.index(item_id)?;
        let item = &self.items[idx];
        if item.status != RollbackStatus::Approved || item.reviewer.is_none() {
            return Err(RecoveryError::UnreviewedExecution(item_id.to_owned()));
        }
        let result = executor.execute(item);
        let actor = COORDINATOR_ROLE;
        let (etype, status, failure) = match result {
            Ok(()) => (
                EventType::RollbackExecuted,
                RollbackStatus::ExecutedSuccess,
                None,
            ),
            Err(msg) => (
                EventType::RollbackFailed,
                RollbackStatus::ExecutedFailed,
                Some(msg),
            ),
        };
        let mut ev = state.event(ledger, etype, actor);
        ev.detail = Some(match &failure {
            Some(msg) => format!("{item_id} {msg}"),
            None => item_id.to_owned(),
        });
        let seq = state.emit(ledger, ev)?;
        let item = &mut self.items[idx];
        item.status = status;
        item.failure = failure;
        item.outcome_seq = Some(seq);
        Ok(item.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), RecoveryError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| RecoveryError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| RecoveryError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RecoveryError> {
        let text = std::fs::read_to_string(path).map_err(|e| RecoveryError::Io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| RecoveryError::Io(e.to_string()))
    }
}

//! The recovery cycle and the reviewed rollback queue.

mod rollback;

pub use rollback::{
    ReviewDecision, RollbackExecutor, RollbackQueue, RollbackQueueItem, RollbackStatus,
    RollbackTrigger, SimulatedExecutor,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{
    BranchClass, BranchClassifier, GatePolicy, Instrumentation, PredicateVector, SkipFlag,
    VerifyContext, VerifyDecision, VerifyReceipt,
};
use crate::ledger::{EventType, Ledger, LedgerError, Outcome};
use crate::lifecycle::{next_state, LifecycleError, TaskState, Trigger, COORDINATOR_ROLE};
use crate::packet::{
    ErrorClass, PacketError, PacketStore, RecoveryDraft, RecoveryStatus, RollbackProfile, Tier,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("recovery needs a blocked decision, got {0:?}")]
    NotBlocked(Outcome),
    #[error("recovery owner is empty")]
    MissingRecoveryOwner,
    #[error("next recovery action is empty")]
    MissingNextAction,
    #[error("recovery cycle {0} is already closed")]
    CycleAlreadyClosed(String),
    #[error("unknown rollback trigger {0:?}")]
    UnknownTrigger(String),
    #[error("rollback item {0} not found")]
    UnknownItem(String),
    #[error("rollback item {0} is not pending review")]
    NotPending(String),
    #[error("rollback review needs a named reviewer")]
    MissingReviewer,
    #[error("rollback item {0} has not been approved")]
    UnreviewedExecution(String),
    #[error("recovery policy: {0}")]
    Policy(String),
    #[error("rollback queue io: {0}")]
    Io(String),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryPolicy {
    pub max_retries: u32,
}

impl Default for RecoveryPolicy {
    fn default() -> Self {
        Self { max_retries: 3 }
    }
}

impl RecoveryPolicy {
    pub fn from_toml(text: &str) -> Result<Self, RecoveryError> {
        let p: RecoveryPolicy =
            toml::from_str(text).map_err(|e| RecoveryError::Policy(e.to_string()))?;
        if p.max_retries == 0 {
            return Err(RecoveryError::Policy(
                "max_retries must be at least 1".into(),
            ));
        }
        Ok(p)
    }

    pub fn error_class(blocking_predicate: u8) -> ErrorClass {
        match blocking_predicate {
            4 => ErrorClass::WeakEvidence,
            1 | 7 => ErrorClass::ScopeDrift,
            5 => ErrorClass::OwnershipGap,
            6 => ErrorClass::StaleGround,
            8 => ErrorClass::VerificationFailure,
            _ => ErrorClass::Other,
        }
    }

    pub fn recoverable(
        &self,
        class: ErrorClass,
        tier: Tier,
        profile: &RollbackProfile,
        retry_count: u32,
    ) -> bool {
        if retry_count >= self.max_retries {
            return false;
        }
        !(class == ErrorClass::VerificationFailure
            && tier == Tier::Deep
            && *profile == RollbackProfile::Declared)
    }

    pub fn draft_for(&self, decision: &VerifyDecision, owner: &str, action: &str) -> RecoveryDraft {
        RecoveryDraft {
            error_class: Self::error_class(decision.blocking_predicate),
            failure_signal: decision.blocked_reason_class.label().to_owned(),
            fallback_used: false,
            next_recovery_action: action.to_owned(),
            recovery_owner: owner.to_owned(),
        }
    }
}

impl BranchClassifier for RecoveryPolicy {
    fn classify(&self, ctx: &VerifyContext, vector: &PredicateVector) -> BranchClass {
        // an active veto is final whatever else failed
        if !vector.get(11) {
            return BranchClass::Unrecoverable;
        }
        let class = Self::error_class(vector.lowest_failed().unwrap_or(0));
        if self.recoverable(class, ctx.tier(), &ctx.rollback_profile, ctx.retry_count) {
            BranchClass::Recoverable
        } else {
            BranchClass::Unrecoverable
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryCycle {
    pub recovery_packet_id: String,
    pub opened_at_seq: u64,
    pub closed_at_seq: Option<u64>,
}

/// Opens a recovery packet for a blocked branch and logs it.
pub fn enter_recovery(
    state: &mut TaskState,
    decision: &VerifyDecision,
    draft: RecoveryDraft,
    store: &mut PacketStore,
    ledger: &mut Ledger,
) -> Result<RecoveryCycle, RecoveryError> {
    if decision.outcome != Outcome::Blocked {
        return Err(RecoveryError::NotBlocked(decision.outcome));
    }
    if draft.recovery_owner.trim().is_empty() {
        return Err(RecoveryError::MissingRecoveryOwner);
    }
    if draft.next_recovery_action.trim().is_empty() {
        return Err(RecoveryError::MissingNextAction);
    }
    next_state(
        state.branch,
        Trigger::plain(EventType::RecoveryPacketCreated),
    )?;
    let owner = draft.recovery_owner.clone();
    let opened_at = ledger.last_seq() + 1;
    let packet = store.open_recovery(&state.task_id, draft, opened_at)?;
    let mut ev = state.event(ledger, EventType::RecoveryPacketCreated, COORDINATOR_ROLE);
    ev.recovery_packet_id = Some(packet.id.value.clone());
    ev.claim_packet_id = store
        .latest_claim(&state.task_id)
        .map(|c| c.id.value.clone());
    ev.owner = Some(owner);
    ev.detail = Some(packet.next_recovery_action.clone());
    let seq = state.emit(ledger, ev)?;
    state.risk.recovery_open = true;
    Ok(RecoveryCycle {
        recovery_packet_id: packet.id.value,
        opened_at_seq: seq,
        closed_at_seq: None,
    })
}

/// Closes the cycle, then sends the repaired claim through the full gate.
pub fn close_recovery_and_reverify(
    state: &mut TaskState,
    cycle: &mut RecoveryCycle,
    store: &mut PacketStore,
    ledger: &mut Ledger,
    gate_policy: &GatePolicy,
    policy: &RecoveryPolicy,
    instrumentation: Instrumentation,
) -> Result<VerifyReceipt, RecoveryError> {
    let current = store
        .recovery_revisions(&cycle.recovery_packet_id)
        .last()
        .ok_or_else(|| PacketError::DanglingRef(cycle.recovery_packet_id.clone()))?;
    if cycle.closed_at_seq.is_some() || current.status == RecoveryStatus::Closed {
        return Err(RecoveryError::CycleAlreadyClosed(
            cycle.recovery_packet_id.clone(),
        ));
    }
    next_state(state.branch, Trigger::plain(EventType::RecoveryClosed))?;
    let seq = ledger.last_seq() + 1;
    let closed = store.close_recovery(&cycle.recovery_packet_id, seq)?;
    let mut ev = state.event(ledger, EventType::RecoveryClosed, COORDINATOR_ROLE);
    ev.recovery_packet_id = Some(closed.id.value.clone());
    let seq = state.emit(ledger, ev)?;
    cycle.closed_at_seq = Some(seq);
    state.risk.recovery_open = false;
    let receipt = state.run_verification(
        store,
        ledger,
        gate_policy,
        policy,
        SkipFlag::none(),
        instrumentation,
    )?;
    Ok(receipt)
}

#[cfg(test)]
mod tests;

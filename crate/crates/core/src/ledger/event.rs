use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gate::BlockedReasonClass;
use crate::packet::{PacketKind, Tier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    TaskCreated,
    StageTransition,
    GroundRefreshed,
    ClaimPacketCreated,
    ClaimPacketRefreshed,
    EvidencePacketCreated,
    VerifyStarted,
    VerifyCompleted,
    RecoveryPacketCreated,
    RecoveryClosed,
    TaskBlocked,
    TaskFailed,
    TaskCompleted,
    DiagnosticReview,
    EscalationBoard,
    EscalationPathViolation,
    ControlHeaderUpdated,
    RollbackEnqueued,
    RollbackReviewed,
    RollbackExecuted,
    RollbackFailed,
    RollbackDenied,
}

impl EventType {
    pub const ALL: [EventType; 22] = [
        EventType::TaskCreated,
        EventType::StageTransition,
        EventType::GroundRefreshed,
        EventType::ClaimPacketCreated,
        EventType::ClaimPacketRefreshed,
        EventType::EvidencePacketCreated,
        EventType::VerifyStarted,
        EventType::VerifyCompleted,
        EventType::RecoveryPacketCreated,
        EventType::RecoveryClosed,
        EventType::TaskBlocked,
        EventType::TaskFailed,
        EventType::TaskCompleted,
        EventType::DiagnosticReview,
        EventType::EscalationBoard,
        EventType::EscalationPathViolation,
        EventType::ControlHeaderUpdated,
        EventType::RollbackEnqueued,
        EventType::RollbackReviewed,
        EventType::RollbackExecuted,
        EventType::RollbackFailed,
        EventType::RollbackDenied,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EventType::TaskCreated => "task_created",
            EventType::StageTransition => "stage_transition",
            EventType::GroundRefreshed => "ground_refreshed",
            EventType::ClaimPacketCreated => "claim_packet_created",
            EventType::ClaimPacketRefreshed => "claim_packet_refreshed",
            EventType::EvidencePacketCreated => "evidence_packet_created",
            EventType::VerifyStarted => "verify_started",
            EventType::VerifyCompleted => "verify_completed",
            EventType::RecoveryPacketCreated => "recovery_packet_created",
            EventType::RecoveryClosed => "recovery_closed",
            EventType::TaskBlocked => "task_blocked",
            EventType::TaskFailed => "task_failed",
            EventType::TaskCompleted => "task_completed",
            EventType::DiagnosticReview => "diagnostic_review",
            EventType::EscalationBoard => "escalation_board",
            EventType::EscalationPathViolation => "escalation_path_violation",
            EventType::ControlHeaderUpdated => "control_header_updated",
            EventType::RollbackEnqueued => "rollback_enqueued",
            EventType::RollbackReviewed => "rollback_reviewed",
            EventType::RollbackExecuted => "rollback_executed",
            EventType::RollbackFailed => "rollback_failed",
            EventType::RollbackDenied => "rollback_denied",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| format!("unknown event type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failed,
    Blocked,
    Skipped,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Success,
        Outcome::Failed,
        Outcome::Blocked,
        Outcome::Skipped,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failed => "failed",
            Outcome::Blocked => "blocked",
            Outcome::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceStatus {
    Accepted,
    Withheld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Production,
    Synthetic,
    Session,
}

impl Origin {
    pub const ALL: [Origin; 3] = [Origin::Production, Origin::Synthetic, Origin::Session];

    pub fn label(self) -> &'static str {
        match self {
            Origin::Production => "production",
            Origin::Synthetic => "synthetic",
            Origin::Session => "session",
        }
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Origin::ALL
            .into_iter()
            .find(|o| o.label() == s)
            .ok_or_else(|| format!("unknown origin {s:?}"))
    }
}

/// Marker carried in `detail` by a deliberately constructed
/// verify_completed row that has no outcome.
pub const MISSING_OUTCOME_ARTIFACT: &str = "missing_outcome_artifact";

/// One governance-trace row. Every field is written on the wire, absent
/// values as null, so files stay column-stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub run_id: String,
    pub task_id: String,
    pub session_id: String,
    pub event_type: EventType,
    pub parent_event_id: Option<u64>,
    pub stage_from: Option<String>,
    pub stage_to: Option<String>,
    pub owner: Option<String>,
    pub accountable: Option<String>,
    pub actor: Option<String>,
    pub common_ground_packet_id: Option<String>,
    pub claim_packet_id: Option<String>,
    pub evidence_packet_id: Option<String>,
    pub recovery_packet_id: Option<String>,
    pub outcome: Option<Outcome>,
    pub acceptance_status: Option<AcceptanceStatus>,
    pub blocked_reason: Option<String>,
    pub blocked_reason_class: Option<BlockedReasonClass>,
    pub blocking_predicate: Option<u8>,
    pub missing_packet_type: Option<PacketKind>,
    pub protocol_expected: Option<String>,
    pub protocol_applied: Option<String>,
    pub latency_ms: Option<u64>,
    pub origin: Option<Origin>,
    pub tier: Option<Tier>,
    pub cluster_id: Option<String>,
    pub detail: Option<String>,
}

impl Event {
    pub fn new(task_id: &str, session_id: &str, event_type: EventType) -> Self {
        Self {
            seq: 0,
            run_id: String::new(),
            task_id: task_id.to_owned(),
            session_id: session_id.to_owned(),
            event_type,
            parent_event_id: None,
            stage_from: None,
            stage_to: None,
            owner: None,
            accountable: None,
            actor: None,
            common_ground_packet_id: None,
            claim_packet_id: None,
            evidence_packet_id: None,
            recovery_packet_id: None,
            outcome: None,
            acceptance_status: None,
            blocked_reason: None,
            blocked_reason_class: None,
            blocking_predicate: None,
            missing_packet_type: None,
            protocol_expected: None,
            protocol_applied: None,
            latency_ms: None,
            origin: None,
            tier: None,
            cluster_id: None,
            detail: None,
        }
    }

    pub fn with_parent(mut self, parent: Option<u64>) -> Self {
        self.parent_event_id = parent;
        self
    }

    pub fn is_missing_outcome_artifact(&self) -> bool {
        self.event_type == EventType::VerifyCompleted
            && self.outcome.is_none()
            && self.detail.as_deref() == Some(MISSING_OUTCOME_ARTIFACT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for e in EventType::ALL {
            assert_eq!(e.label().parse::<EventType>().unwrap(), e);
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.label()));
        }
    }

    #[test]
    fn wire_row_has_every_field() {
        let ev = Event::new("T1", "S1", EventType::TaskCreated);
        let v = serde_json::to_value(&ev).unwrap();
        let obj = v.as_object().unwrap();
        for key in [
            "seq",
            "run_id",
            "parent_event_id",
            "outcome",
            "origin",
            "tier",
            "cluster_id",
        ] {
            assert!(obj.contains_key(key), "{key}");
        }
        assert!(obj["tier"].is_null());
    }
}

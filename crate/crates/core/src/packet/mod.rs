//! Packet family: the durable state artifacts admission reads.
//!
//! Common-ground packets carry the accepted task reality and are versioned;
//! claims, evidence and recovery packets carry one branch of work; procedure
//! packs declare the expected reporting path for an archetype. Every packet
//! is append-only once stored (see [`PacketStore`]).

mod memory;
mod store;

pub use memory::{classify_memory, ArtifactKind, MemoryArtifact, MemoryClass, MemoryIndex};
pub use store::{
    check_freshness, Attachment, ClaimDraft, EvidenceDraft, FreshnessVerdict, GroundUpdate,
    PacketStore, RecoveryDraft, StoreLine, TaskIndex, WorkProduct,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{Canonical, Digest};
use crate::ledger::EventType;

pub type TaskId = String;
pub type RoleId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    CommonGround,
    Claim,
    Evidence,
    Recovery,
    ProcedurePack,
}

impl PacketKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::CommonGround => "common_ground",
            Self::Claim => "claim",
            Self::Evidence => "evidence",
            Self::Recovery => "recovery",
            Self::ProcedurePack => "procedure_pack",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PacketId {
    pub value: String,
    pub kind: PacketKind,
}

impl PacketId {
    pub fn new(value: impl Into<String>, kind: PacketKind) -> Self {
        Self {
            value: value.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Light,
    Standard,
    Deep,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Light, Tier::Standard, Tier::Deep];

    pub fn label(self) -> &'static str {
        match self {
            Self::Light => "light",
            Self::Standard => "standard",
            Self::Deep => "deep",
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "light" => Ok(Self::Light),
            "standard" => Ok(Self::Standard),
            "deep" => Ok(Self::Deep),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyState {
    NotInvoked,
    Pending,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvisorySeverity {
    Info,
    Serious,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisorySignal {
    pub severity: AdvisorySeverity,
    pub treated: bool,
    pub dismissed_under_policy: bool,
}

impl AdvisorySignal {
    pub fn is_open_serious(&self) -> bool {
        self.severity == AdvisorySeverity::Serious && !self.treated && !self.dismissed_under_policy
    }
}

/// Per-task control state read by every lane.
///
/// Unlike packets the header is live state: the coordinator updates it as
/// the task moves. `verify_state` only moves forward within one claim
/// branch; a new claim revision resets it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlHeader {
    pub tier: Tier,
    pub task_class: String,
    pub owner: RoleId,
    pub accountable: RoleId,
    pub verify_state: VerifyState,
    /// Tier the current verification was opened under.
    pub verify_mode: Option<Tier>,
    pub stale_ground: bool,
    pub advisory_signals: Vec<AdvisorySignal>,
    pub veto_active: bool,
}

impl ControlHeader {
    pub fn new(tier: Tier, task_class: impl Into<String>, owner: &str, accountable: &str) -> Self {
        Self {
            tier,
            task_class: task_class.into(),
            owner: owner.to_owned(),
            accountable: accountable.to_owned(),
            verify_state: VerifyState::NotInvoked,
            verify_mode: None,
            stale_ground: false,
            advisory_signals: Vec::new(),
            veto_active: false,
        }
    }

    /// Header used when a task has none on record. Everything that depends
    /// on it evaluates false.
    pub fn incomplete() -> Self {
        Self::new(Tier::Deep, "", "", "")
    }

    pub fn is_complete(&self) -> bool {
        !self.owner.is_empty() && !self.accountable.is_empty()
    }

    pub fn advance_verify_state(&mut self, to: VerifyState) -> Result<(), PacketError> {
        if to < self.verify_state {
            return Err(PacketError::VerifyStateRegression {
                from: self.verify_state,
                to,
            });
        }
        self.verify_state = to;
        Ok(())
    }

    pub(crate) fn start_claim_branch(&mut self) {
        self.verify_state = VerifyState::NotInvoked;
        self.verify_mode = None;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonGroundPacket {
    pub id: PacketId,
    pub task_id: TaskId,
    pub version: u32,
    pub objective: String,
    pub accepted_facts: Vec<String>,
    pub open_questions: Vec<String>,
    pub assumptions: Vec<String>,
    pub current_owner: RoleId,
    pub current_stage: String,
    pub success_criteria: Vec<String>,
    pub content_digest: Digest,
    /// Store-level supersession marker. Not part of the content digest.
    pub superseded: bool,
}

impl CommonGroundPacket {
    pub fn compute_digest(&self) -> Digest {
        Canonical::new()
            .text("id", &self.id.value)
            .text("task_id", &self.task_id)
            .int("version", u64::from(self.version))
            .text("objective", &self.objective)
            .list("accepted_facts", &self.accepted_facts)
            .list("open_questions", &self.open_questions)
            .list("assumptions", &self.assumptions)
            .text("current_owner", &self.current_owner)
            .text("current_stage", &self.current_stage)
            .list("success_criteria", &self.success_criteria)
            .digest()
    }

    pub fn digest_matches(&self) -> bool {
        self.compute_digest() == self.content_digest
    }

    pub fn reference(&self) -> GroundRef {
        GroundRef {
            id: self.id.clone(),
            version: self.version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundRef {
    pub id: PacketId,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimState {
    Done,
    Partial,
    NotFixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimPacket {
    pub id: PacketId,
    pub task_id: TaskId,
    /// 0 for the assembled claim, +1 per refresh during recovery.
    pub revision: u32,
    pub ground_ref: GroundRef,
    pub ground_digest: Digest,
    pub claimed_state: ClaimState,
    pub fix_status: String,
    pub evidence_ref: Option<PacketId>,
    pub owner: RoleId,
    pub accountable: RoleId,
    pub unresolved_questions: Vec<String>,
    pub verify_state: VerifyState,
    pub created_seq: u64,
}

impl ClaimPacket {
    pub fn content_digest(&self) -> Digest {
        Canonical::new()
            .text("id", &self.id.value)
            .int("revision", u64::from(self.revision))
            .text("ground_id", &self.ground_ref.id.value)
            .int("ground_version", u64::from(self.ground_ref.version))
            .text("ground_digest", self.ground_digest.as_str())
            .text("claimed_state", claim_state_label(self.claimed_state))
            .text("fix_status", &self.fix_status)
            .opt_text(
                "evidence_ref",
                self.evidence_ref.as_ref().map(|p| p.value.as_str()),
            )
            .text("owner", &self.owner)
            .text("accountable", &self.accountable)
            .list("unresolved_questions", &self.unresolved_questions)
            .int("created_seq", self.created_seq)
            .digest()
    }
}

fn claim_state_label(state: ClaimState) -> &'static str {
    match state {
        ClaimState::Done => "done",
        ClaimState::Partial => "partial",
        ClaimState::NotFixed => "not_fixed",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    DeterministicCheck,
    Document,
    ToolOutput,
    Testimony,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportingRef {
    #[serde(rename = "ref")]
    pub locator: String,
    pub source_type: SourceType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceQuality {
    Weak,
    Adequate,
    Strong,
}

impl std::str::FromStr for EvidenceQuality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weak" => Ok(Self::Weak),
            "adequate" => Ok(Self::Adequate),
            "strong" => Ok(Self::Strong),
            other => Err(format!("unknown evidence quality `{other}`")),
        }
    }
}

/// `missing_required` and `quality` have no serde defaults: a stored
/// evidence packet that omits either is rejected on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidencePacket {
    pub id: PacketId,
    pub task_id: TaskId,
    pub supporting_refs: Vec<SupportingRef>,
    pub missing_required: Vec<String>,
    pub quality: EvidenceQuality,
    pub accepted_facts_cited: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    WeakEvidence,
    ScopeDrift,
    OwnershipGap,
    StaleGround,
    VerificationFailure,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryPacket {
    pub id: PacketId,
    pub task_id: TaskId,
    pub revision: u32,
    pub error_class: ErrorClass,
    pub failure_signal: String,
    pub retry_count: u32,
    pub fallback_used: bool,
    pub next_recovery_action: String,
    pub recovery_owner: RoleId,
    pub status: RecoveryStatus,
    pub opened_at_seq: u64,
    pub closed_at_seq: Option<u64>,
}

impl RecoveryPacket {
    pub fn validate(&self) -> Result<(), PacketError> {
        if self.status == RecoveryStatus::Open {
            if self.recovery_owner.trim().is_empty() {
                return Err(PacketError::MissingRecoveryOwner);
            }
            if self.next_recovery_action.trim().is_empty() {
                return Err(PacketError::MissingNextAction);
            }
        }
        if let Some(closed) = self.closed_at_seq {
            if closed <= self.opened_at_seq {
                return Err(PacketError::Invalid(format!(
                    "recovery {} closed at seq {closed} before it opened at {}",
                    self.id.value, self.opened_at_seq
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackProfile {
    None,
    Declared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedurePack {
    pub id: PacketId,
    pub task_archetype: String,
    pub required_protocol: Tier,
    pub lane_sequence: Vec<RoleId>,
    pub required_packets: Vec<PacketKind>,
    /// Canonical reporting path for one task, one claim slot per claim.
    pub expected_event_template: Vec<EventType>,
    pub rollback_profile: RollbackProfile,
}

impl ProcedurePack {
    /// The default pack used by the runtime and the simulator.
    pub fn canonical(id: impl Into<String>) -> Self {
        Self {
            id: PacketId::new(id, PacketKind::ProcedurePack),
            task_archetype: "governed-change".to_owned(),
            required_protocol: Tier::Standard,
            lane_sequence: vec![
                "runtime_coordinator".to_owned(),
                "implementation_worker".to_owned(),
                "admission_verifier".to_owned(),
            ],
            required_packets: vec![
                PacketKind::CommonGround,
                PacketKind::Claim,
                PacketKind::Evidence,
            ],
            expected_event_template: vec![
                EventType::TaskCreated,
                EventType::ClaimPacketCreated,
                EventType::EvidencePacketCreated,
                EventType::VerifyStarted,
                EventType::VerifyCompleted,
                EventType::TaskCompleted,
            ],
            rollback_profile: RollbackProfile::Declared,
        }
    }

    /// Checks the template: non-empty, and each claim slot carries exactly
    /// one `verify_started` followed by exactly one `verify_completed`.
    pub fn validate(&self) -> Result<(), PacketError> {
        if self.expected_event_template.is_empty() {
            return Err(PacketError::InvalidTemplate("template is empty".into()));
        }
        let mut slots = 0usize;
        // 0 = no open slot, 1 = claim seen, 2 = verify started, 3 = verify completed
        let mut phase = 0u8;
        for ev in &self.expected_event_template {
            match ev {
                EventType::ClaimPacketCreated => {
                    if phase == 1 || phase == 2 {
                        return Err(PacketError::InvalidTemplate(
                            "claim slot opened before the previous one was verified".into(),
                        ));
                    }
                    slots += 1;
                    phase = 1;
                }
                EventType::VerifyStarted => {
                    if phase != 1 {
                        return Err(PacketError::InvalidTemplate(
                            "verify_started outside a claim slot or repeated".into(),
                        ));
                    }
                    phase = 2;
                }
                EventType::VerifyCompleted => {
                    if phase != 2 {
                        return Err(PacketError::InvalidTemplate(
                            "verify_completed without a preceding verify_started".into(),
                        ));
                    }
                    phase = 3;
                }
                _ => {}
            }
        }
        if slots == 0 {
            return Err(PacketError::InvalidTemplate(
                "template has no claim slot".into(),
            ));
        }
        if phase != 3 {
            return Err(PacketError::InvalidTemplate(
                "last claim slot is never verified".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PacketRecord {
    CommonGround(CommonGroundPacket),
    Claim(ClaimPacket),
    Evidence(EvidencePacket),
    Recovery(RecoveryPacket),
    ProcedurePack(ProcedurePack),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("objective is empty")]
    EmptyObjective,
    #[error("success criteria are empty")]
    EmptyCriteria,
    #[error("owner and accountable must both be set")]
    MissingOwnership,
    #[error("common ground {0} v{1} is already superseded; re-read the current version")]
    StaleBase(String, u32),
    #[error("claim would be assembled over superseded common ground {0} v{1}")]
    SupersededGround(String, u32),
    #[error("packet reference {0} does not resolve in the store")]
    DanglingRef(String),
    #[error("task {0} already has common ground")]
    GroundExists(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("recovery owner is empty")]
    MissingRecoveryOwner,
    #[error("next recovery action is empty")]
    MissingNextAction,
    #[error("retry count may not decrease ({from} -> {to})")]
    RetryRegression { from: u32, to: u32 },
    #[error("verify state may not move backwards ({from:?} -> {to:?})")]
    VerifyStateRegression { from: VerifyState, to: VerifyState },
    #[error("invalid procedure pack template: {0}")]
    InvalidTemplate(String),
    #[error("duplicate packet id {0}")]
    DuplicateId(String),
    #[error("digest mismatch on stored packet {0}")]
    DigestMismatch(String),
    #[error("invalid packet: {0}")]
    Invalid(String),
    #[error("packet file: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_pack_template_is_valid() {
        ProcedurePack::canonical("P").validate().unwrap();
    }

    #[test]
    fn template_without_verify_is_rejected() {
        let mut pack = ProcedurePack::canonical("P");
        pack.expected_event_template = vec![EventType::TaskCreated, EventType::ClaimPacketCreated];
        assert!(matches!(
            pack.validate(),
            Err(PacketError::InvalidTemplate(_))
        ));
        pack.expected_event_template.clear();
        assert!(matches!(
            pack.validate(),
            Err(PacketError::InvalidTemplate(_))
        ));
    }

    #[test]
    fn template_with_double_verify_in_one_slot_is_rejected() {
        let mut pack = ProcedurePack::canonical("P");
        pack.expected_event_template = vec![
            EventType::ClaimPacketCreated,
            EventType::VerifyStarted,
            EventType::VerifyStarted,
            EventType::VerifyCompleted,
        ];
        assert!(pack.validate().is_err());
    }

    #[test]
    fn two_claim_slots_are_fine() {
        let mut pack = ProcedurePack::canonical("P");
        pack.expected_event_template = vec![
            EventType::ClaimPacketCreated,
            EventType::VerifyStarted,
            EventType::VerifyCompleted,
            EventType::ClaimPacketCreated,
            EventType::VerifyStarted,
            EventType::VerifyCompleted,
        ];
        pack.validate().unwrap();
    }

    #[test]
    fn header_verify_state_is_forward_only() {
        let mut h = ControlHeader::new(Tier::Light, "fix", "worker", "lead");
        h.advance_verify_state(VerifyState::Pending).unwrap();
        h.advance_verify_state(VerifyState::Completed).unwrap();
        assert!(h.advance_verify_state(VerifyState::Pending).is_err());
    }

    #[test]
    fn evidence_without_missing_required_does_not_parse() {
        let json = r#"{"id":{"value":"E","kind":"evidence"},"task_id":"T","supporting_refs":[],"quality":"strong","accepted_facts_cited":[]}"#;
        assert!(serde_json::from_str::<EvidencePacket>(json).is_err());
        let json = r#"{"id":{"value":"E","kind":"evidence"},"task_id":"T","supporting_refs":[],"missing_required":[],"accepted_facts_cited":[]}"#;
        assert!(serde_json::from_str::<EvidencePacket>(json).is_err());
    }

    #[test]
    fn open_recovery_requires_owner_and_action() {
        let mut r = RecoveryPacket {
            id: PacketId::new("R", PacketKind::Recovery),
            task_id: "T".into(),
            revision: 0,
            error_class: ErrorClass::WeakEvidence,
            failure_signal: "phi4".into(),
            retry_count: 0,
            fallback_used: false,
            next_recovery_action: "attach test log".into(),
            recovery_owner: String::new(),
            status: RecoveryStatus::Open,
            opened_at_seq: 3,
            closed_at_seq: None,
        };
        assert_eq!(r.validate(), Err(PacketError::MissingRecoveryOwner));
        r.recovery_owner = "worker".into();
        r.next_recovery_action.clear();
        assert_eq!(r.validate(), Err(PacketError::MissingNextAction));
        r.status = RecoveryStatus::Closed;
        r.closed_at_seq = Some(4);
        r.validate().unwrap();
    }
}

//! The admission gate: eleven predicates over a read-only snapshot, the
//! outcome function, and the acceptance projection.

mod policy;

pub use policy::GatePolicy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::ledger::{AcceptanceStatus, Event, EventType, Ledger, LedgerError, Origin, Outcome};
use crate::packet::{
    check_freshness, ClaimPacket, ClaimState, CommonGroundPacket, ControlHeader, EvidencePacket,
    FreshnessVerdict, PacketKind, PacketStore, RollbackProfile, Tier, VerifyState,
};

pub const PREDICATE_COUNT: usize = 11;

/// Role that emits verify events.
pub const VERIFIER_ROLE: &str = "admission_verifier";

/// Legacy reason text written when reason classes are not instrumented.
pub const GENERIC_BLOCKED_REASON: &str = "verify_blocked";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GateError {
    #[error("verification refused: no appendable ledger")]
    LedgerUnavailable,
    #[error("inconsistent branch: {0}")]
    InconsistentBranch(&'static str),
    #[error("gate policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredicateVector {
    pub phi: [bool; PREDICATE_COUNT],
}

impl PredicateVector {
    pub fn all_true() -> Self {
        Self {
            phi: [true; PREDICATE_COUNT],
        }
    }

    /// Bit `i` of `bits` is φ(i+1).
    pub fn from_bits(bits: u16) -> Self {
        let mut phi = [false; PREDICATE_COUNT];
        for (i, p) in phi.iter_mut().enumerate() {
            *p = bits & (1 << i) != 0;
        }
        Self { phi }
    }

    pub fn to_bits(&self) -> u16 {
        self.phi
            .iter()
            .enumerate()
            .filter(|(_, p)| **p)
            .map(|(i, _)| 1u16 << i)
            .sum()
    }

    /// 1-based predicate access.
    pub fn get(&self, index: usize) -> bool {
        self.phi[index - 1]
    }

    pub fn all(&self) -> bool {
        self.phi.iter().all(|p| *p)
    }

    pub fn failed_indices(&self) -> Vec<u8> {
        (1..=PREDICATE_COUNT as u8)
            .filter(|i| !self.phi[*i as usize - 1])
            .collect()
    }

    pub fn lowest_failed(&self) -> Option<u8> {
        self.phi.iter().position(|p| !p).map(|i| i as u8 + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockedReasonClass {
    None,
    MissingGroundAlignment,
    MissingClaim,
    PartialState,
    VerifyNotInvoked,
    EvidenceFloorFailed,
    OwnerGap,
    StaleGround,
    OpenBlocker,
    EscalationPathViolation,
    UntreatedAdvisory,
    ActiveRecovery,
    Veto,
}

impl BlockedReasonClass {
    pub fn for_predicate(index: u8) -> Self {
        match index {
            0 => Self::None,
            1 => Self::MissingGroundAlignment,
            2 => Self::PartialState,
            3 => Self::VerifyNotInvoked,
            4 => Self::EvidenceFloorFailed,
            5 => Self::OwnerGap,
            6 => Self::StaleGround,
            7 => Self::OpenBlocker,
            8 => Self::EscalationPathViolation,
            9 => Self::UntreatedAdvisory,
            10 => Self::ActiveRecovery,
            11 => Self::Veto,
            _ => panic!("predicate index {index} out of range"),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::MissingGroundAlignment => "missing_ground_alignment",
            Self::MissingClaim => "missing_claim",
            Self::PartialState => "partial_state",
            Self::VerifyNotInvoked => "verify_not_invoked",
            Self::EvidenceFloorFailed => "evidence_floor_failed",
            Self::OwnerGap => "owner_gap",
            Self::StaleGround => "stale_ground",
            Self::OpenBlocker => "open_blocker",
            Self::EscalationPathViolation => "escalation_path_violation",
            Self::UntreatedAdvisory => "untreated_advisory",
            Self::ActiveRecovery => "active_recovery",
            Self::Veto => "veto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SkipFlag {
    pub sigma: bool,
    pub reason: String,
}

impl SkipFlag {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn report_only(reason: &str) -> Self {
        Self {
            sigma: true,
            reason: reason.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchClass {
    Unclassified,
    Recoverable,
    Unrecoverable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyDecision {
    pub outcome: Outcome,
    pub acceptance_status: AcceptanceStatus,
    pub predicate_vector: PredicateVector,
    pub failed_indices: Vec<u8>,
    pub blocked_reason_class: BlockedReasonClass,
    pub blocking_predicate: u8,
    pub missing_packet_type: Option<PacketKind>,
}

pub fn project_acceptance(outcome: Outcome) -> AcceptanceStatus {
    match outcome {
        Outcome::Success => AcceptanceStatus::Accepted,
        Outcome::Blocked | Outcome::Failed | Outcome::Skipped => AcceptanceStatus::Withheld,
    }
}

/// The outcome function. Total: σ is consulted first, then `recoverable`.
pub fn decide(vector: PredicateVector, skip: &SkipFlag, recoverable: bool) -> VerifyDecision {
    let outcome = if vector.all() {
        Outcome::Success
    } else if skip.sigma {
        Outcome::Skipped
    } else if recoverable {
        Outcome::Blocked
    } else {
        Outcome::Failed
    };
    let blocking = vector.lowest_failed().unwrap_or(0);
    VerifyDecision {
        outcome,
        acceptance_status: project_acceptance(outcome),
        predicate_vector: vector,
        failed_indices: vector.failed_indices(),
        blocked_reason_class: BlockedReasonClass::for_predicate(blocking),
        blocking_predicate: blocking,
        missing_packet_type: None,
    }
}

/// `decide` with the branch classification checked against σ.
pub fn decide_for_branch(
    vector: PredicateVector,
    skip: &SkipFlag,
    branch: BranchClass,
) -> Result<VerifyDecision, GateError> {
    match (skip.sigma, branch) {
        (true, BranchClass::Recoverable | BranchClass::Unrecoverable) => Err(
            GateError::InconsistentBranch("skip flag set on an already classified branch"),
        ),
        (false, BranchClass::Unclassified) if !vector.all() => Err(GateError::InconsistentBranch(
            "non-success without skip needs a branch classification",
        )),
        _ => Ok(decide(vector, skip, branch == BranchClass::Recoverable)),
    }
}

/// Immutable inputs for one gate evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyContext {
    pub task_id: String,
    pub claim: Option<ClaimPacket>,
    pub ground: Option<CommonGroundPacket>,
    pub evidence: Option<EvidencePacket>,
    pub header: ControlHeader,
    pub recovery_open: bool,
    pub retry_count: u32,
    pub diagnostic_review_seen: bool,
    pub escalation_board_seen: bool,
    /// The first diagnostic review precedes the first board event.
    pub diagnostic_first: bool,
    /// `None` when there is no claim or its ground reference dangles.
    pub freshness: Option<FreshnessVerdict>,
    pub rollback_profile: RollbackProfile,
    pub work_product_digest: Option<Digest>,
}

impl VerifyContext {
    /// Reads everything the gate needs. Pure read of store and ledger.
    pub fn gather(task_id: &str, store: &PacketStore, ledger: &Ledger) -> Self {
        let claim = store.latest_claim(task_id).cloned();
        let ground = store.current_ground(task_id).cloned();
        let evidence = claim.as_ref().and_then(|c| store.evidence_for(c)).cloned();
        let freshness = claim.as_ref().and_then(|c| check_freshness(c, store).ok());
        let header = store
            .header(task_id)
            .cloned()
            .unwrap_or_else(ControlHeader::incomplete);
        let recovery = store.current_recovery(task_id);
        let events = ledger.task_events(task_id);
        let first = |t: EventType| events.iter().find(|e| e.event_type == t).map(|e| e.seq);
        let diag = first(EventType::DiagnosticReview);
        let board = first(EventType::EscalationBoard);
        Self {
            task_id: task_id.to_owned(),
            claim,
            ground,
            evidence,
            header,
            recovery_open: store.open_recovery_for(task_id).is_some(),
            retry_count: recovery.map(|r| r.retry_count).unwrap_or(0),
            diagnostic_review_seen: diag.is_some(),
            escalation_board_seen: board.is_some(),
            diagnostic_first: match (diag, board) {
                (Some(d), Some(b)) => d < b,
                (Some(_), None) => true,
                (None, _) => false,
            },
            freshness,
            rollback_profile: store
                .pack_for_task(task_id)
                .map(|p| p.rollback_profile)
                .unwrap_or(RollbackProfile::None),
            work_product_digest: store.work_product(task_id).map(|w| w.digest.clone()),
        }
    }

    pub fn tier(&self) -> Tier {
        self.header.tier
    }
}

fn nonempty(items: &[String]) -> bool {
    items.iter().any(|s| !s.trim().is_empty())
}

/// Total over any context; missing inputs make predicates false.
pub fn evaluate_predicates(ctx: &VerifyContext, policy: &GatePolicy) -> PredicateVector {
    let h = &ctx.header;
    let claim = ctx.claim.as_ref();
    let phi1 = ctx.ground.as_ref().is_some_and(|g| {
        !g.superseded && !g.objective.trim().is_empty() && nonempty(&g.success_criteria)
    });
    let phi2 = claim.is_some_and(|c| c.claimed_state == ClaimState::Done);
    let phi3 = h.verify_state >= VerifyState::Pending && h.verify_mode == Some(h.tier);
    let phi4 = ctx
        .evidence
        .as_ref()
        .is_some_and(|e| e.missing_required.is_empty() && e.quality >= policy.evidence_floor);
    let phi5 = h.is_complete()
        && claim.is_some_and(|c| c.owner == h.owner && c.accountable == h.accountable);
    let phi6 = ctx.freshness == Some(FreshnessVerdict::Fresh) && !h.stale_ground;
    let phi7 = claim.is_some_and(|c| c.unresolved_questions.is_empty())
        && ctx
            .ground
            .as_ref()
            .is_some_and(|g| g.open_questions.is_empty());
    let phi8 = h.tier != Tier::Deep || (ctx.diagnostic_review_seen && ctx.diagnostic_first);
    let phi9 = !h.advisory_signals.iter().any(|a| a.is_open_serious());
    let phi10 = !ctx.recovery_open;
    let phi11 = !h.veto_active;
    PredicateVector {
        phi: [
            phi1, phi2, phi3, phi4, phi5, phi6, phi7, phi8, phi9, phi10, phi11,
        ],
    }
}

/// `decide_for_branch` plus the context-only refinements: an absent claim
/// is `missing_claim`, and the first absent packet kind is named.
pub fn decide_in_context(
    ctx: &VerifyContext,
    vector: PredicateVector,
    skip: &SkipFlag,
    branch: BranchClass,
) -> Result<VerifyDecision, GateError> {
    let mut d = decide_for_branch(vector, skip, branch)?;
    if d.outcome != Outcome::Success {
        if ctx.claim.is_none() && d.blocking_predicate == 2 {
            d.blocked_reason_class = BlockedReasonClass::MissingClaim;
        }
        d.missing_packet_type = if ctx.ground.is_none() {
            Some(PacketKind::CommonGround)
        } else if ctx.claim.is_none() {
            Some(PacketKind::Claim)
        } else if ctx.evidence.is_none() {
            Some(PacketKind::Evidence)
        } else {
            None
        };
    }
    Ok(d)
}

/// Decides Recoverable for a non-success, non-skipped branch.
pub trait BranchClassifier {
    fn classify(&self, ctx: &VerifyContext, vector: &PredicateVector) -> BranchClass;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrumentation {
    /// Reason class, blocking predicate and missing packet type are written.
    #[default]
    Full,
    /// Only a generic blocked reason is written.
    GenericBlockedReason,
}

/// Where the verify events land in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceScope {
    pub session_id: String,
    pub origin: Option<Origin>,
    pub cluster_id: Option<String>,
    pub protocol_expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyRequest {
    pub task_id: String,
    pub scope: TraceScope,
    pub skip: SkipFlag,
    pub instrumentation: Instrumentation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReceipt {
    pub decision: VerifyDecision,
    pub context: VerifyContext,
    pub started_seq: u64,
    pub completed_seq: u64,
}

/// Runs the gate for one task. Reads the store, appends `verify_started`
/// and `verify_completed`, and nothing else.
pub fn verify_claim(
    req: &VerifyRequest,
    store: &PacketStore,
    ledger: &mut Ledger,
    policy: &GatePolicy,
    classifier: &dyn BranchClassifier,
) -> Result<VerifyReceipt, GateError> {
    if ledger.is_sealed() {
        return Err(GateError::LedgerUnavailable);
    }
    let ctx = VerifyContext::gather(&req.task_id, store, ledger);
    let vector = evaluate_predicates(&ctx, policy);
    let branch = if req.skip.sigma || vector.all() {
        BranchClass::Unclassified
    } else {
        classifier.classify(&ctx, &vector)
    };
    let decision = decide_in_context(&ctx, vector, &req.skip, branch)?;

    let base = verify_event_base(&req.task_id, &req.scope, &ctx);
    let mut started = base.clone();
    started.event_type = EventType::VerifyStarted;
    started.parent_event_id = ledger.task_head(&req.task_id);
    let started_seq = ledger.append(started)?;

    let mut done = base;
    done.event_type = EventType::VerifyCompleted;
    done.parent_event_id = Some(started_seq);
    done.outcome = Some(decision.outcome);
    done.acceptance_status = Some(decision.acceptance_status);
    if decision.outcome != Outcome::Success {
        match req.instrumentation {
            Instrumentation::Full => {
                done.blocked_reason = Some(decision.blocked_reason_class.label().to_owned());
                done.blocked_reason_class = Some(decision.blocked_reason_class);
                done.blocking_predicate = Some(decision.blocking_predicate);
                done.missing_packet_type = decision.missing_packet_type;
            }
            Instrumentation::GenericBlockedReason => {
                done.blocked_reason = Some(GENERIC_BLOCKED_REASON.to_owned());
            }
        }
        if req.skip.sigma && !req.skip.reason.is_empty() {
            done.detail = Some(req.skip.reason.clone());
        }
    }
    let completed_seq = ledger.append(done)?;
    Ok(VerifyReceipt {
        decision,
        context: ctx,
        started_seq,
        completed_seq,
    })
}

fn verify_event_base(task_id: &str, scope: &TraceScope, ctx: &VerifyContext) -> Event {
    let mut ev = Event::new(task_id, &scope.session_id, EventType::VerifyStarted);
    ev.owner = Some(ctx.header.owner.clone()).filter(|s| !s.is_empty());
    ev.accountable = Some(ctx.header.accountable.clone()).filter(|s| !s.is_empty());
    ev.actor = Some(VERIFIER_ROLE.to_owned());
    ev.common_ground_packet_id = ctx.ground.as_ref().map(|g| g.id.value.clone());
    ev.claim_packet_id = ctx.claim.as_ref().map(|c| c.id.value.clone());
    ev.evidence_packet_id = ctx.evidence.as_ref().map(|e| e.id.value.clone());
    ev.protocol_expected = scope.protocol_expected.clone();
    ev.protocol_applied = ctx.header.verify_mode.map(|t| t.label().to_owned());
    ev.origin = scope.origin;
    ev.tier = Some(ctx.header.tier);
    ev.cluster_id = scope.cluster_id.clone();
    ev
}

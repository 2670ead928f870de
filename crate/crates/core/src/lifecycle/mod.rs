//! Task state, tier selection and the branch state machine.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{
    verify_claim, BranchClassifier, GateError, GatePolicy, TraceScope, VerifyDecision,
    VerifyReceipt, VerifyRequest,
};
use crate::ledger::{AcceptanceStatus, Event, EventType, Ledger, LedgerError, Outcome};
use crate::packet::{
    ControlHeader, PacketError, PacketId, PacketStore, ProcedurePack, RoleId, RollbackProfile,
    Tier, VerifyState,
};

pub const COORDINATOR_ROLE: &str = "runtime_coordinator";
pub const DIAGNOSTIC_ROLE: &str = "diagnostic_reviewer";
pub const BOARD_ROLE: &str = "escalation_board";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("request has an empty objective")]
    EmptyRequest,
    #[error("illegal transition: {from} + {trigger}")]
    IllegalTransition { from: BranchState, trigger: Trigger },
    #[error("deep-tier task needs a procedure pack with a declared rollback profile")]
    RollbackUndeclared,
    #[error("withheld report has no owner for the next action")]
    OwnerlessNextAction,
    #[error("escalation board event precedes any diagnostic review")]
    BoardBeforeDiagnostic,
    #[error("trace does not start with task_created")]
    MissingTaskCreated,
    #[error("no task_created event for task {0}")]
    UnknownTask(String),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchState {
    InProgress,
    ClaimReady,
    VerifyPending,
    VerifiedSuccess,
    Blocked,
    Failed,
    Recovered,
    RolledBack,
}

impl BranchState {
    pub const ALL: [BranchState; 8] = [
        BranchState::InProgress,
        BranchState::ClaimReady,
        BranchState::VerifyPending,
        BranchState::VerifiedSuccess,
        BranchState::Blocked,
        BranchState::Failed,
        BranchState::Recovered,
        BranchState::RolledBack,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BranchState::InProgress => "in_progress",
            BranchState::ClaimReady => "claim_ready",
            BranchState::VerifyPending => "verify_pending",
            BranchState::VerifiedSuccess => "verified_success",
            BranchState::Blocked => "blocked",
            BranchState::Failed => "failed",
            BranchState::Recovered => "recovered",
            BranchState::RolledBack => "rolled_back",
        }
    }
}

impl fmt::Display for BranchState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// An event type, with the outcome split out for `verify_completed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trigger {
    pub event: EventType,
    pub outcome: Option<Outcome>,
}

impl Trigger {
    pub fn of(event: &Event) -> Self {
        Self {
            event: event.event_type,
            outcome: event.outcome,
        }
    }

    pub fn plain(event: EventType) -> Self {
        Self {
            event,
            outcome: None,
        }
    }

    pub fn verify(outcome: Outcome) -> Self {
        Self {
            event: EventType::VerifyCompleted,
            outcome: Some(outcome),
        }
    }

    /// Every trigger the table is defined over.
    pub fn all() -> Vec<Trigger> {
        let mut out = Vec::new();
        for e in EventType::ALL {
            out.push(Trigger::plain(e));
            if e == EventType::VerifyCompleted {
                out.extend(Outcome::ALL.map(Trigger::verify));
            }
        }
        out
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.outcome {
            Some(o) => write!(f, "{}({})", self.event, o.label()),
            None => write!(f, "{}", self.event),
        }
    }
}

/// Events that never move the branch.
fn is_neutral(e: EventType) -> bool {
    matches!(
        e,
        EventType::StageTransition
            | EventType::GroundRefreshed
            | EventType::ControlHeaderUpdated
            | EventType::EscalationPathViolation
    )
}

pub fn next_state(from: BranchState, trigger: Trigger) -> Result<BranchState, LifecycleError> {
    use BranchState::*;
    use EventType as E;
    let illegal = Err(LifecycleError::IllegalTransition { from, trigger });
    if is_neutral(trigger.event) {
        return if trigger.outcome.is_none() {
            Ok(from)
        } else {
            illegal
        };
    }
    let escalation = matches!(trigger.event, E::DiagnosticReview | E::EscalationBoard);
    let rollback_hold = matches!(
        trigger.event,
        E::RollbackEnqueued | E::RollbackReviewed | E::RollbackDenied | E::RollbackFailed
    );
    let to = match (from, trigger.event, trigger.outcome) {
        (_, E::VerifyCompleted, None) => return illegal,
        (_, e, Some(_)) if e != E::VerifyCompleted => return illegal,

        (InProgress, E::ClaimPacketCreated, _) => ClaimReady,
        (InProgress, E::TaskBlocked, _) => Blocked,
        (InProgress, E::TaskFailed, _) => Failed,
        (InProgress, _, _) if escalation => InProgress,

        (ClaimReady, E::EvidencePacketCreated | E::ClaimPacketRefreshed, _) => ClaimReady,
        (ClaimReady, E::VerifyStarted, _) => VerifyPending,
        (ClaimReady, E::TaskBlocked, _) => Blocked,
        (ClaimReady, E::TaskFailed, _) => Failed,
        (ClaimReady, _, _) if escalation => ClaimReady,

        (VerifyPending, E::VerifyCompleted, Some(Outcome::Success)) => VerifiedSuccess,
        (VerifyPending, E::VerifyCompleted, Some(Outcome::Blocked)) => Blocked,
        (VerifyPending, E::VerifyCompleted, Some(Outcome::Failed)) => Failed,
        (VerifyPending, E::VerifyCompleted, Some(Outcome::Skipped)) => ClaimReady,

        (VerifiedSuccess, E::TaskCompleted, _) => VerifiedSuccess,

        (Blocked, E::RecoveryPacketCreated, _) => Recovered,
        (Blocked, E::TaskBlocked, _) => Blocked,
        (Blocked, E::TaskFailed, _) => Failed,
        (Blocked, E::RollbackExecuted, _) => RolledBack,
        (Blocked, _, _) if rollback_hold || escalation => Blocked,

        (
            Recovered,
            E::ClaimPacketCreated
            | E::ClaimPacketRefreshed
            | E::EvidencePacketCreated
            | E::RecoveryClosed,
            _,
        ) => Recovered,
        (Recovered, E::VerifyStarted, _) => VerifyPending,
        (Recovered, E::TaskBlocked, _) => Blocked,
        (Recovered, E::TaskFailed, _) => Failed,
        (Recovered, _, _) if escalation => Recovered,

        (Failed, E::TaskFailed, _) => Failed,
        (Failed, E::RollbackExecuted, _) => RolledBack,
        (Failed, _, _) if rollback_hold => Failed,

        (RolledBack, E::ClaimPacketCreated, _) => ClaimReady,

        _ => return illegal,
    };
    Ok(to)
}

/// The legal-transition table as tab-separated text, one row per legal
/// (from, trigger) pair.
pub fn transition_table_tsv() -> String {
    let mut out = String::from("from\ttrigger\tto\n");
    for from in BranchState::ALL {
        for t in Trigger::all() {
            if let Ok(to) = next_state(from, t) {
                out.push_str(&format!("{from}\t{t}\t{to}\n"));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from: BranchState,
    pub trigger_event: Trigger,
    pub to: BranchState,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskHint {
    HighRisk,
    Ambiguous,
    RollbackRequired,
    CrossLane,
}

/// Light for hint-free single-step work, deep for high risk or a declared
/// rollback need, standard otherwise.
pub fn select_tier(hints: &[RiskHint], single_step: bool) -> Tier {
    if hints
        .iter()
        .any(|h| matches!(h, RiskHint::HighRisk | RiskHint::RollbackRequired))
    {
        Tier::Deep
    } else if hints.is_empty() && single_step {
        Tier::Light
    } else {
        Tier::Standard
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub tier: Tier,
    pub advisory_summary: String,
    pub recovery_open: bool,
    pub veto_active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRequest {
    pub task_id: String,
    pub objective: String,
    pub criteria: Vec<String>,
    pub owner: RoleId,
    pub accountable: RoleId,
    pub task_class: String,
    pub hints: Vec<RiskHint>,
    pub single_step: bool,
    /// Forces the tier instead of deriving it from hints.
    pub tier_override: Option<Tier>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskState {
    pub task_id: String,
    pub objective: String,
    pub criteria: Vec<String>,
    pub owner: RoleId,
    pub accountable: RoleId,
    pub stage: String,
    pub open_questions: Vec<String>,
    pub risk: RiskSummary,
    pub memory_refs: Vec<PacketId>,
    pub branch: BranchState,
    pub scope: TraceScope,
    pub transitions: Vec<TransitionRecord>,
}

impl TaskState {
    pub fn tier(&self) -> Tier {
        self.risk.tier
    }

    /// Applies one already-appended event to the branch.
    pub fn transition(&mut self, event: &Event) -> Result<BranchState, LifecycleError> {
        let trigger = Trigger::of(event);
        let to = next_state(self.branch, trigger)?;
        self.transitions.push(TransitionRecord {
            from: self.branch,
            trigger_event: trigger,
            to,
            seq: event.seq,
        });
        self.branch = to;
        if let (Some(from), Some(to)) = (&event.stage_from, &event.stage_to) {
            if from == &self.stage {
                self.stage = to.clone();
            }
        }
        Ok(to)
    }

    /// Template for the next event on this task: scope, ownership and tier
    /// filled in, parent linked to the current task head.
    pub fn event(&self, ledger: &Ledger, event_type: EventType, actor: &str) -> Event {
        let mut ev = Event::new(&self.task_id, &self.scope.session_id, event_type);
        ev.parent_event_id = ledger.task_head(&self.task_id);
        ev.owner = Some(self.owner.clone());
        ev.accountable = Some(self.accountable.clone());
        ev.actor = Some(actor.to_owned());
        ev.protocol_expected = self.scope.protocol_expected.clone();
        ev.origin = self.scope.origin;
        ev.tier = Some(self.risk.tier);
        ev.cluster_id = self.scope.cluster_id.clone();
        ev
    }

    /// Rebuilds task state from its trace and the store, for tools that
    /// act on a persisted run.
    pub fn from_ledger(
        task_id: &str,
        ledger: &Ledger,
        store: &PacketStore,
    ) -> Result<Self, LifecycleError> {
        let events = ledger.task_events(task_id);
        let created = events
            .iter()
            .find(|e| e.event_type == EventType::TaskCreated)
            .ok_or_else(|| LifecycleError::UnknownTask(task_id.to_owned()))?;
        let branch = replay_branch(events.iter().copied())?;
        let ground = store
            .current_ground(task_id)
            .ok_or_else(|| LifecycleError::UnknownTask(task_id.to_owned()))?;
        let header = store
            .header(task_id)
            .cloned()
            .unwrap_or_else(ControlHeader::incomplete);
        let mut memory_refs = vec![ground.id.clone()];
        if let Some(p) = store.pack_for_task(task_id) {
            memory_refs.push(p.id.clone());
        }
        Ok(Self {
            task_id: task_id.to_owned(),
            objective: ground.objective.clone(),
            criteria: ground.success_criteria.clone(),
            owner: header.owner.clone(),
            accountable: header.accountable.clone(),
            stage: ground.current_stage.clone(),
            open_questions: ground.open_questions.clone(),
            risk: RiskSummary {
                tier: created.tier.unwrap_or(header.tier),
                advisory_summary: String::new(),
                recovery_open: store.open_recovery_for(task_id).is_some(),
                veto_active: header.veto_active,
            },
            memory_refs,
            branch,
            scope: TraceScope {
                session_id: created.session_id.clone(),
                origin: created.origin,
                cluster_id: created.cluster_id.clone(),
                protocol_expected: created.protocol_expected.clone(),
            },
            transitions: Vec::new(),
        })
    }

    /// Marks the header's verification as opened in `mode`.
    pub fn open_verification(
        &self,
        store: &mut PacketStore,
        mode: Option<Tier>,
    ) -> Result<(), LifecycleError> {
        let header = store
            .header_mut(&self.task_id)
            .ok_or_else(|| LifecycleError::UnknownTask(self.task_id.clone()))?;
        if mode.is_some() && header.verify_state < VerifyState::Pending {
            header.advance_verify_state(VerifyState::Pending)?;
        }
        header.verify_mode = mode;
        Ok(())
    }

    /// Opens verification in the tier-required mode, runs the gate, applies
    /// both verify events to the branch and closes the header's verify state.
    pub fn run_verification(
        &mut self,
        store: &mut PacketStore,
        ledger: &mut Ledger,
        policy: &GatePolicy,
        classifier: &dyn BranchClassifier,
        skip: crate::gate::SkipFlag,
        instrumentation: crate::gate::Instrumentation,
    ) -> Result<VerifyReceipt, LifecycleError> {
        self.open_verification(store, Some(self.risk.tier))?;
        self.verify_opened(store, ledger, policy, classifier, skip, instrumentation)
    }

    /// As `run_verification`, for a header the caller already prepared.
    pub fn verify_opened(
        &mut self,
        store: &mut PacketStore,
        ledger: &mut Ledger,
        policy: &GatePolicy,
        classifier: &dyn BranchClassifier,
        skip: crate::gate::SkipFlag,
        instrumentation: crate::gate::Instrumentation,
    ) -> Result<VerifyReceipt, LifecycleError> {
        next_state(self.branch, Trigger::plain(EventType::VerifyStarted))?;
        let req = VerifyRequest {
            task_id: self.task_id.clone(),
            scope: self.scope.clone(),
            skip,
            instrumentation,
        };
        let receipt = verify_claim(&req, store, ledger, policy, classifier)?;
        for seq in [receipt.started_seq, receipt.completed_seq] {
            let ev = ledger.get(seq).expect("just appended").clone();
            self.transition(&ev)?;
        }
        if let Some(h) = store.header_mut(&self.task_id) {
            if h.verify_state < VerifyState::Completed {
                h.verify_state = VerifyState::Completed;
            }
        }
        Ok(receipt)
    }

    /// Checks legality, appends, then transitions. An illegal event is
    /// never written.
    pub fn emit(&mut self, ledger: &mut Ledger, event: Event) -> Result<u64, LifecycleError> {
        next_state(self.branch, Trigger::of(&event))?;
        let seq = ledger.append(event)?;
        let stored = ledger.get(seq).expect("just appended").clone();
        self.transition(&stored)?;
        Ok(seq)
    }
}

/// Validates the request, selects a tier, links the registered pack `pack_id`, mints common ground, writes the
/// header and logs `task_created`.
pub fn ingest_task(
    req: &TaskRequest,
    scope: &TraceScope,
    pack_id: Option<&str>,
    store: &mut PacketStore,
    ledger: &mut Ledger,
) -> Result<TaskState, LifecycleError> {
    if req.objective.trim().is_empty() {
        return Err(LifecycleError::EmptyRequest);
    }
    let pack: Option<ProcedurePack> = match pack_id {
        Some(id) => Some(
            store
                .pack(id)
                .cloned()
                .ok_or_else(|| PacketError::DanglingRef(id.to_owned()))?,
        ),
        None => None,
    };
    let pack = pack.as_ref();
    let tier = req
        .tier_override
        .unwrap_or_else(|| select_tier(&req.hints, req.single_step));
    if tier == Tier::Deep && pack.is_none_or(|p| p.rollback_profile != RollbackProfile::Declared) {
        return Err(LifecycleError::RollbackUndeclared);
    }
    let ground = store.mint_common_ground(
        &req.task_id,
        &req.objective,
        &req.criteria,
        &req.owner,
        &req.accountable,
    )?;
    store.set_header(
        &req.task_id,
        ControlHeader::new(tier, req.task_class.clone(), &req.owner, &req.accountable),
    );
    let mut memory_refs = vec![ground.id.clone()];
    if let Some(p) = pack {
        store.link_pack(&req.task_id, &p.id)?;
        memory_refs.push(p.id.clone());
    }
    let mut scope = scope.clone();
    if scope.protocol_expected.is_none() {
        scope.protocol_expected = pack.map(|p| p.task_archetype.clone());
    }
    let mut state = TaskState {
        task_id: req.task_id.clone(),
        objective: req.objective.clone(),
        criteria: req.criteria.clone(),
        owner: req.owner.clone(),
        accountable: req.accountable.clone(),
        stage: ground.current_stage.clone(),
        open_questions: ground.open_questions.clone(),
        risk: RiskSummary {
            tier,
            advisory_summary: String::new(),
            recovery_open: false,
            veto_active: false,
        },
        memory_refs,
        branch: BranchState::InProgress,
        scope,
        transitions: Vec::new(),
    };
    let mut ev = state.event(ledger, EventType::TaskCreated, COORDINATOR_ROLE);
    ev.common_ground_packet_id = Some(ground.id.value.clone());
    ev.stage_to = Some(state.stage.clone());
    let seq = ledger.append(ev)?;
    state.transitions.push(TransitionRecord {
        from: BranchState::InProgress,
        trigger_event: Trigger::plain(EventType::TaskCreated),
        to: BranchState::InProgress,
        seq,
    });
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicReport {
    pub acceptance_status: AcceptanceStatus,
    pub outcome: Outcome,
    pub owner_of_next_action: Option<RoleId>,
}

/// Surfaces a gate decision. Only success surfaces as completion; anything
/// withheld must name who acts next.
pub fn surface_outcome(
    decision: &VerifyDecision,
    next_owner: Option<&str>,
) -> Result<PublicReport, LifecycleError> {
    if decision.outcome == Outcome::Success {
        return Ok(PublicReport {
            acceptance_status: AcceptanceStatus::Accepted,
            outcome: Outcome::Success,
            owner_of_next_action: None,
        });
    }
    let owner = next_owner
        .filter(|o| !o.trim().is_empty())
        .ok_or(LifecycleError::OwnerlessNextAction)?;
    Ok(PublicReport {
        acceptance_status: AcceptanceStatus::Withheld,
        outcome: decision.outcome,
        owner_of_next_action: Some(owner.to_owned()),
    })
}

/// Deep tier: diagnostic review, then the board. A board event already on
/// record without an earlier diagnostic is refused and logged as a path
/// violation. Other tiers go straight to the board.
pub fn escalate(state: &mut TaskState, ledger: &mut Ledger) -> Result<(), LifecycleError> {
    let events = ledger.task_events(&state.task_id);
    let first = |t: EventType| events.iter().find(|e| e.event_type == t).map(|e| e.seq);
    let (diag, board) = (
        first(EventType::DiagnosticReview),
        first(EventType::EscalationBoard),
    );
    if state.tier() == Tier::Deep {
        if let Some(b) = board {
            if diag.is_none_or(|d| d > b) {
                let mut v =
                    state.event(ledger, EventType::EscalationPathViolation, COORDINATOR_ROLE);
                v.detail = Some("escalation_board precedes diagnostic_review".into());
                state.emit(ledger, v)?;
                return Err(LifecycleError::BoardBeforeDiagnostic);
            }
        }
        if diag.is_none() {
            let ev = state.event(ledger, EventType::DiagnosticReview, DIAGNOSTIC_ROLE);
            state.emit(ledger, ev)?;
        }
    }
    let ev = state.event(ledger, EventType::EscalationBoard, BOARD_ROLE);
    state.emit(ledger, ev)?;
    Ok(())
}

/// Folds a task's events through the state machine from `task_created`.
pub fn replay_branch<'a, I>(events: I) -> Result<BranchState, LifecycleError>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut it = events.into_iter();
    match it.next() {
        Some(e) if e.event_type == EventType::TaskCreated => {}
        _ => return Err(LifecycleError::MissingTaskCreated),
    }
    let mut state = BranchState::InProgress;
    for e in it {
        state = next_state(state, Trigger::of(e))?;
    }
    Ok(state)
}

/// The public projection of a task trace: creation, fresh claims, verify
/// outcomes and recovery openings.
pub fn public_trace<'a, I>(events: I) -> Vec<Trigger>
where
    I: IntoIterator<Item = &'a Event>,
{
    events
        .into_iter()
        .filter(|e| {
            matches!(
                e.event_type,
                EventType::TaskCreated
                    | EventType::ClaimPacketCreated
                    | EventType::VerifyCompleted
                    | EventType::RecoveryPacketCreated
            )
        })
        .map(Trigger::of)
        .collect()
}

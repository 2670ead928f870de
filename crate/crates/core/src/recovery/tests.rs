use super::*;
use crate::gate::{decide, TraceScope};
use crate::ids::IdGen;
use crate::ledger::Origin;
use crate::lifecycle::{ingest_task, BranchState, RiskHint, TaskRequest};
use crate::packet::{ClaimDraft, EvidenceDraft, EvidenceQuality, ProcedurePack};

fn setup(hints: Vec<RiskHint>) -> (TaskState, PacketStore, Ledger) {
    let mut store = PacketStore::new(IdGen::seeded(9));
    store.register_pack(ProcedurePack::canonical("P")).unwrap();
    let mut ledger = Ledger::new("R");
    let req = TaskRequest {
        task_id: "T".into(),
        objective: "fix flaky test".into(),
        criteria: vec!["ci green".into()],
        owner: "worker".into(),
        accountable: "lead".into(),
        task_class: "bugfix".into(),
        hints,
        single_step: false,
        tier_override: None,
    };
    let scope = TraceScope {
        session_id: "S".into(),
        origin: Some(Origin::Production),
        cluster_id: None,
        protocol_expected: None,
    };
    let state = ingest_task(&req, &scope, Some("P"), &mut store, &mut ledger).unwrap();
    (state, store, ledger)
}

fn claim_with_evidence(
    state: &mut TaskState,
    store: &mut PacketStore,
    ledger: &mut Ledger,
    quality: EvidenceQuality,
) {
    let ground = store.current_ground(&state.task_id).unwrap().clone();
    let claim = store
        .assemble_claim(
            &state.task_id,
            &ground,
            ClaimDraft::done("worker", "lead"),
            ledger.last_seq() + 1,
        )
        .unwrap();
    let mut ev = state.event(ledger, EventType::ClaimPacketCreated, "worker");
    ev.claim_packet_id = Some(claim.id.value.clone());
    state.emit(ledger, ev).unwrap();
    store
        .attach_evidence(
            &claim,
            EvidenceDraft {
                supporting_refs: vec![],
                missing_required: vec![],
                quality,
                accepted_facts_cited: vec![],
            },
            ledger.last_seq() + 1,
        )
        .unwrap();
    let ev = state.event(ledger, EventType::EvidencePacketCreated, "worker");
    state.emit(ledger, ev).unwrap();
}

fn blocked() -> VerifyDecision {
    let mut v = PredicateVector::all_true();
    v.phi[3] = false;
    decide(v, &SkipFlag::none(), true)
}

fn draft(owner: &str, action: &str) -> RecoveryDraft {
    RecoveryPolicy::default().draft_for(&blocked(), owner, action)
}

#[test]
fn error_classes() {
    assert_eq!(RecoveryPolicy::error_class(4), ErrorClass::WeakEvidence);
    assert_eq!(RecoveryPolicy::error_class(5), ErrorClass::OwnershipGap);
    assert_eq!(
        RecoveryPolicy::error_class(8),
        ErrorClass::VerificationFailure
    );
    assert_eq!(RecoveryPolicy::error_class(11), ErrorClass::Other);
}

#[test]
fn recoverability() {
    let p = RecoveryPolicy::default();
    let declared = RollbackProfile::Declared;
    assert!(p.recoverable(ErrorClass::WeakEvidence, Tier::Deep, &declared, 0));
    assert!(!p.recoverable(ErrorClass::WeakEvidence, Tier::Standard, &declared, 3));
    assert!(!p.recoverable(ErrorClass::VerificationFailure, Tier::Deep, &declared, 0));
    assert!(p.recoverable(
        ErrorClass::VerificationFailure,
        Tier::Standard,
        &declared,
        0
    ));
}

#[test]
fn policy_toml() {
    assert_eq!(
        RecoveryPolicy::from_toml("max_retries = 5")
            .unwrap()
            .max_retries,
        5
    );
    assert!(RecoveryPolicy::from_toml("max_retries = 0").is_err());
}

#[test]
fn enter_recovery_needs_owner_action_and_blocked() {
    let (mut s, mut store, mut l) = setup(vec![]);
    claim_with_evidence(&mut s, &mut store, &mut l, EvidenceQuality::Weak);
    let r = s
        .run_verification(
            &mut store,
            &mut l,
            &GatePolicy::default(),
            &RecoveryPolicy::default(),
            SkipFlag::none(),
            Instrumentation::Full,
        )
        .unwrap();
    assert_eq!(r.decision.outcome, Outcome::Blocked);
    let before = l.len();
    assert_eq!(
        enter_recovery(&mut s, &r.decision, draft("", "retry"), &mut store, &mut l),
        Err(RecoveryError::MissingRecoveryOwner)
    );
    assert_eq!(
        enter_recovery(
            &mut s,
            &r.decision,
            draft("worker", " "),
            &mut store,
            &mut l
        ),
        Err(RecoveryError::MissingNextAction)
    );
    let ok = decide(PredicateVector::all_true(), &SkipFlag::none(), true);
    assert_eq!(
        enter_recovery(&mut s, &ok, draft("worker", "retry"), &mut store, &mut l),
        Err(RecoveryError::NotBlocked(Outcome::Success))
    );
    assert_eq!(l.len(), before);
    let c = enter_recovery(
        &mut s,
        &r.decision,
        draft("worker", "attach logs"),
        &mut store,
        &mut l,
    )
    .unwrap();
    assert_eq!(s.branch, BranchState::Recovered);
    assert_eq!(
        l.get(c.opened_at_seq).unwrap().event_type,
        EventType::RecoveryPacketCreated
    );
}

#[test]
fn open_recovery_keeps_phi10_false() {
    let (mut s, mut store, mut l) = setup(vec![]);
    claim_with_evidence(&mut s, &mut store, &mut l, EvidenceQuality::Weak);
    let r = s
        .run_verification(
            &mut store,
            &mut l,
            &GatePolicy::default(),
            &RecoveryPolicy::default(),
            SkipFlag::none(),
            Instrumentation::Full,
        )
        .unwrap();
    enter_recovery(
        &mut s,
        &r.decision,
        draft("worker", "attach logs"),
        &mut store,
        &mut l,
    )
    .unwrap();
    // verify with the cycle still open: gate must refuse on phi10
    let r2 = s
        .run_verification(
            &mut store,
            &mut l,
            &GatePolicy::default(),
            &RecoveryPolicy::default(),
            SkipFlag::none(),
            Instrumentation::Full,
        )
        .unwrap();
    assert!(!r2.decision.predicate_vector.get(10));
    assert_ne!(r2.decision.outcome, Outcome::Success);
}

#[test]
fn still_failing_evidence_blocks_again_and_counts_a_retry() {
    let (mut s, mut store, mut l) = setup(vec![]);
    claim_with_evidence(&mut s, &mut store, &mut l, EvidenceQuality::Weak);
    let gp = GatePolicy::default();
    let rp = RecoveryPolicy::default();
    let r = s
        .run_verification(
            &mut store,
            &mut l,
            &gp,
            &rp,
            SkipFlag::none(),
            Instrumentation::Full,
        )
        .unwrap();
    let mut cycle = enter_recovery(
        &mut s,
        &r.decision,
        draft("worker", "attach logs"),
        &mut store,
        &mut l,
    )
    .unwrap();
    let r2 = close_recovery_and_reverify(
        &mut s,
        &mut cycle,
        &mut store,
        &mut l,
        &gp,
        &rp,
        Instrumentation::Full,
    )
    .unwrap();
    assert_eq!(r2.decision.outcome, Outcome::Blocked);
    assert_eq!(store.current_recovery("T").unwrap().retry_count, 1);
    assert!(cycle.closed_at_seq.unwrap() > cycle.opened_at_seq);
    assert!(matches!(
        close_recovery_and_reverify(
            &mut s,
            &mut cycle,
            &mut store,
            &mut l,
            &gp,
            &rp,
            Instrumentation::Full
        ),
        Err(RecoveryError::CycleAlreadyClosed(_))
    ));
}

#[test]
fn retry_ceiling_turns_blocked_into_failed() {
    let (mut s, mut store, mut l) = setup(vec![]);
    claim_with_evidence(&mut s, &mut store, &mut l, EvidenceQuality::Weak);
    let gp = GatePolicy::default();
    let rp = RecoveryPolicy { max_retries: 2 };
    let mut r = s
        .run_verification(
            &mut store,
            &mut l,
            &gp,
            &rp,
            SkipFlag::none(),
            Instrumentation::Full,
        )
        .unwrap();
    let mut outcomes = vec![r.decision.outcome];
    while r.decision.outcome == Outcome::Blocked {
        let mut c = enter_recovery(
            &mut s,
            &r.decision,
            draft("worker", "again"),
            &mut store,
            &mut l,
        )
        .unwrap();
        r = close_recovery_and_reverify(
            &mut s,
            &mut c,
            &mut store,
            &mut l,
            &gp,
            &rp,
            Instrumentation::Full,
        )
        .unwrap();
        outcomes.push(r.decision.outcome);
    }
    assert_eq!(
        outcomes,
        vec![Outcome::Blocked, Outcome::Blocked, Outcome::Failed]
    );
    assert_eq!(s.branch, BranchState::Failed);
}

#[test]
fn triggers_parse() {
    assert_eq!(
        "weak_evidence_post_claim"
            .parse::<RollbackTrigger>()
            .unwrap(),
        RollbackTrigger::WeakEvidencePostClaim
    );
    assert!(matches!(
        "because".parse::<RollbackTrigger>(),
        Err(RecoveryError::UnknownTrigger(_))
    ));
}

fn failed_deep_task() -> (TaskState, PacketStore, Ledger) {
    let (mut s, mut store, mut l) = setup(vec![RiskHint::HighRisk]);
    claim_with_evidence(&mut s, &mut store, &mut l, EvidenceQuality::Strong);
    // no diagnostic review on a deep task: phi8 fails, unrecoverable
    let r = s
        .run_verification(
            &mut store,
            &mut l,
            &GatePolicy::default(),
            &RecoveryPolicy::default(),
            SkipFlag::none(),
            Instrumentation::Full,
        )
        .unwrap();
    assert_eq!(r.decision.outcome, Outcome::Failed);
    (s, store, l)
}

#[test]
fn approved_rollback_executes_and_rolls_back() {
    let (mut s, store, mut l) = failed_deep_task();
    let mut q = RollbackQueue::new();
    let item = q
        .enqueue(
            &mut s,
            RollbackTrigger::HighRiskVerificationFailure,
            &store,
            &mut l,
        )
        .unwrap();
    assert_eq!(item.status, RollbackStatus::PendingReview);
    assert!(item.policy_declared);
    let mut exec = SimulatedExecutor::default();
    assert!(matches!(
        q.execute(&item.item_id, &mut exec, &mut s, &mut l),
        Err(RecoveryError::UnreviewedExecution(_))
    ));
    assert_eq!(
        q.review(
            &item.item_id,
            "",
            ReviewDecision::Approve,
            &mut exec,
            &mut s,
            &mut l
        ),
        Err(RecoveryError::MissingReviewer)
    );
    let done = q
        .review(
            &item.item_id,
            "ops_reviewer",
            ReviewDecision::Approve,
            &mut exec,
            &mut s,
            &mut l,
        )
        .unwrap();
    assert_eq!(done.status, RollbackStatus::ExecutedSuccess);
    assert_eq!(s.branch, BranchState::RolledBack);
    let types: Vec<EventType> = l.events().rev().take(3).map(|e| e.event_type).collect();
    assert_eq!(
        types,
        vec![
            EventType::RollbackExecuted,
            EventType::RollbackReviewed,
            EventType::RollbackEnqueued
        ]
    );
}

#[test]
fn failed_rollback_is_logged_once() {
    let (mut s, store, mut l) = failed_deep_task();
    let mut q = RollbackQueue::new();
    let item = q
        .enqueue(
            &mut s,
            RollbackTrigger::HighRiskVerificationFailure,
            &store,
            &mut l,
        )
        .unwrap();
    let mut exec = SimulatedExecutor {
        failing: ["T".to_string()].into_iter().collect(),
    };
    let done = q
        .review(
            &item.item_id,
            "ops_reviewer",
            ReviewDecision::Approve,
            &mut exec,
            &mut s,
            &mut l,
        )
        .unwrap();
    assert_eq!(done.status, RollbackStatus::ExecutedFailed);
    assert_eq!(s.branch, BranchState::Failed);
    assert_eq!(
        l.events().last().unwrap().event_type,
        EventType::RollbackFailed
    );
    assert!(matches!(
        q.execute(&item.item_id, &mut exec, &mut s, &mut l),
        Err(RecoveryError::UnreviewedExecution(_))
    ));
}

#[test]
fn denied_rollback_leaves_branch() {
    let (mut s, store, mut l) = failed_deep_task();
    let mut q = RollbackQueue::new();
    let item = q
        .enqueue(
            &mut s,
            RollbackTrigger::ChallengeConfirmedInvalidity,
            &store,
            &mut l,
        )
        .unwrap();
    let done = q
        .review(
            &item.item_id,
            "ops_reviewer",
            ReviewDecision::Deny,
            &mut SimulatedExecutor::default(),
            &mut s,
            &mut l,
        )
        .unwrap();
    assert_eq!(done.status, RollbackStatus::Denied);
    assert_eq!(s.branch, BranchState::Failed);
    assert!(matches!(
        q.review(
            &item.item_id,
            "ops_reviewer",
            ReviewDecision::Approve,
            &mut SimulatedExecutor::default(),
            &mut s,
            &mut l
        ),
        Err(RecoveryError::NotPending(_))
    ));
}

#[test]
fn queue_round_trips() {
    let (mut s, store, mut l) = failed_deep_task();
    let mut q = RollbackQueue::new();
    q.enqueue(
        &mut s,
        RollbackTrigger::WeakEvidencePostClaim,
        &store,
        &mut l,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rollback_queue.json");
    q.save(&path).unwrap();
    assert_eq!(RollbackQueue::load(&path).unwrap(), q);
}

//! Runtime coordinator: one writer over the store, ledger and rollback
//! queue, with optional shadow PGV records on every verification.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{
    GateError, GatePolicy, Instrumentation, SkipFlag, TraceScope, VerifyContext, VerifyDecision,
};
use crate::ids::IdGen;
use crate::ledger::{Event, EventType, Ledger, LedgerError, Origin, MISSING_OUTCOME_ARTIFACT};
use crate::lifecycle::{
    escalate, ingest_task, next_state, LifecycleError, TaskRequest, TaskState, Trigger,
    COORDINATOR_ROLE, DIAGNOSTIC_ROLE,
};
use crate::packet::{
    ClaimDraft, EvidenceDraft, GroundUpdate, PacketError, PacketStore, ProcedurePack, Tier,
};
use crate::pgv::{pgv_check, write_jsonl, PgvError, ShadowRecord};
use crate::recovery::{
    enter_recovery, RecoveryCycle, RecoveryError, RecoveryPolicy, ReviewDecision, RollbackExecutor,
    RollbackQueue, RollbackQueueItem, RollbackTrigger, SimulatedExecutor,
};

pub const PACK_ID: &str = "pack-governed-change";
pub const LEDGER_DIR: &str = "ledger";
pub const STORE_FILE: &str = "packets.ndjson";
pub const SHADOW_FILE: &str = "shadow.jsonl";
pub const QUEUE_FILE: &str = "rollback_queue.json";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} already exists")]
    DuplicateTask(String),
    #[error("task {0} has no claim")]
    NoClaim(String),
    #[error("task {0} has no open recovery cycle")]
    NoRecovery(String),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Pgv(#[from] PgvError),
    #[error("io: {0}")]
    Io(String),
}

/// Policy file contents: `[gate]` and `[recovery]` tables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub gate: GatePolicy,
    pub recovery: RecoveryPolicy,
    pub instrumentation: Instrumentation,
    pub shadow: bool,
}

impl RuntimeConfig {
    pub fn from_toml(text: &str) -> Result<Self, RuntimeError> {
        let cfg: RuntimeConfig =
            toml::from_str(text).map_err(|e| RuntimeError::Io(e.to_string()))?;
        cfg.gate
            .validate()
            .map_err(|e| RuntimeError::Io(e.to_string()))?;
        if cfg.recovery.max_retries == 0 {
            return Err(RuntimeError::Io(
                "recovery.max_retries must be at least 1".into(),
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub task_id: String,
    pub completed_seq: u64,
    pub decision: VerifyDecision,
}

pub struct Runtime {
    pub store: PacketStore,
    pub ledger: Ledger,
    pub queue: RollbackQueue,
    pub config: RuntimeConfig,
    pub executor: SimulatedExecutor,
    tasks: BTreeMap<String, TaskState>,
    cycles: BTreeMap<String, RecoveryCycle>,
    decisions: Vec<DecisionRecord>,
    shadow: Vec<ShadowRecord>,
}

impl Runtime {
    pub fn new(run_id: &str, ids: IdGen, config: RuntimeConfig) -> Self {
        Self::with_ledger(Ledger::new(run_id), ids, config)
    }

    /// Ledger files are written under `dir/ledger` as the run goes.
    pub fn create_dir(
        run_id: &str,
        dir: &Path,
        ids: IdGen,
        config: RuntimeConfig,
    ) -> Result<Self, RuntimeError> {
        let ledger = Ledger::create_dir(run_id, &dir.join(LEDGER_DIR))?;
        Ok(Self::with_ledger(ledger, ids, config))
    }

    fn with_ledger(ledger: Ledger, ids: IdGen, config: RuntimeConfig) -> Self {
        let mut store = PacketStore::new(ids);
        store
            .register_pack(ProcedurePack::canonical(PACK_ID))
            .expect("fresh store accepts the canonical pack");
        Self {
            store,
            ledger,
            queue: RollbackQueue::new(),
            config,
            executor: SimulatedExecutor::default(),
            tasks: BTreeMap::new(),
            cycles: BTreeMap::new(),
            decisions: Vec::new(),
            shadow: Vec::new(),
        }
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskState> {
        self.tasks.get(task_id)
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn shadow_records(&self) -> &[ShadowRecord] {
        &self.shadow
    }

    fn state(&mut self, task_id: &str) -> Result<&mut TaskState, RuntimeError> {
        self.tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))
    }

    /// `under_pack` links the canonical pack and puts the task's events on
    /// the replay-accounted path.
    pub fn ingest(
        &mut self,
        req: &TaskRequest,
        scope: &TraceScope,
        under_pack: bool,
    ) -> Result<(), RuntimeError> {
        if self.tasks.contains_key(&req.task_id) {
            return Err(RuntimeError::DuplicateTask(req.task_id.clone()));
        }
        let pack = under_pack.then_some(PACK_ID);
        let state = ingest_task(req, scope, pack, &mut self.store, &mut self.ledger)?;
        self.tasks.insert(req.task_id.clone(), state);
        Ok(())
    }

    pub fn claim(&mut self, task_id: &str, draft: ClaimDraft) -> Result<u64, RuntimeError> {
        let actor = draft.owner.clone();
        let ground = self
            .store
            .current_ground(task_id)
            .cloned()
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let seq = self.ledger.last_seq() + 1;
        let claim = self.store.assemble_claim(task_id, &ground, draft, seq)?;
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let mut ev = state.event(&self.ledger, EventType::ClaimPacketCreated, &actor);
        ev.claim_packet_id = Some(claim.id.value.clone());
        ev.common_ground_packet_id = Some(ground.id.value.clone());
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    pub fn refresh_claim(&mut self, task_id: &str, draft: ClaimDraft) -> Result<u64, RuntimeError> {
        let actor = draft.owner.clone();
        let prior = self
            .store
            .latest_claim(task_id)
            .cloned()
            .ok_or_else(|| RuntimeError::NoClaim(task_id.to_owned()))?;
        let ground = self
            .store
            .current_ground(task_id)
            .cloned()
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let seq = self.ledger.last_seq() + 1;
        let claim = self.store.refresh_claim(&prior, &ground, draft, seq)?;
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let mut ev = state.event(&self.ledger, EventType::ClaimPacketRefreshed, &actor);
        ev.claim_packet_id = Some(claim.id.value.clone());
        ev.common_ground_packet_id = Some(ground.id.value.clone());
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    pub fn evidence(&mut self, task_id: &str, draft: EvidenceDraft) -> Result<u64, RuntimeError> {
        let claim = self
            .store
            .latest_claim(task_id)
            .cloned()
            .ok_or_else(|| RuntimeError::NoClaim(task_id.to_owned()))?;
        let seq = self.ledger.last_seq() + 1;
        let ev_packet = self.store.attach_evidence(&claim, draft, seq)?;
        let actor = claim.owner.clone();
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let mut ev = state.event(&self.ledger, EventType::EvidencePacketCreated, &actor);
        ev.claim_packet_id = Some(claim.id.value.clone());
        ev.evidence_packet_id = Some(ev_packet.id.value.clone());
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    pub fn refresh_ground(
        &mut self,
        task_id: &str,
        update: GroundUpdate,
    ) -> Result<u64, RuntimeError> {
        let prior = self
            .store
            .current_ground(task_id)
            .cloned()
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let next = self.store.refresh_ground(&prior, update)?;
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        state.objective = next.objective.clone();
        state.criteria = next.success_criteria.clone();
        state.open_questions = next.open_questions.clone();
        let mut ev = state.event(&self.ledger, EventType::GroundRefreshed, COORDINATOR_ROLE);
        ev.common_ground_packet_id = Some(next.id.value.clone());
        ev.detail = Some(format!("version {}", next.version));
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    /// Mutates the control header and logs the update.
    pub fn update_header(
        &mut self,
        task_id: &str,
        f: impl FnOnce(&mut crate::packet::ControlHeader),
    ) -> Result<u64, RuntimeError> {
        let header = self
            .store
            .header_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        f(header);
        let veto = header.veto_active;
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        state.risk.veto_active = veto;
        let ev = state.event(
            &self.ledger,
            EventType::ControlHeaderUpdated,
            COORDINATOR_ROLE,
        );
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    pub fn set_work_product(&mut self, task_id: &str, content: &str) {
        self.store.set_work_product(task_id, content);
    }

    pub fn verify(&mut self, task_id: &str) -> Result<VerifyDecision, RuntimeError> {
        let tier = self.state(task_id)?.tier();
        self.verify_with(task_id, SkipFlag::none(), Some(tier))
    }

    /// Opens verification in `mode` (which may differ from the task tier) and
    /// runs the gate. With shadow enabled, PGV reads the same snapshot first.
    pub fn verify_with(
        &mut self,
        task_id: &str,
        skip: SkipFlag,
        mode: Option<Tier>,
    ) -> Result<VerifyDecision, RuntimeError> {
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        state.open_verification(&mut self.store, mode)?;
        let shadow = self.config.shadow.then(|| {
            let ctx = VerifyContext::gather(task_id, &self.store, &self.ledger);
            let n = self.shadow.iter().filter(|r| r.task_id == task_id).count() + 1;
            pgv_check(&format!("{task_id}/{n}"), &ctx, &self.config.gate)
        });
        let receipt = state.verify_opened(
            &mut self.store,
            &mut self.ledger,
            &self.config.gate,
            &self.config.recovery,
            skip,
            self.config.instrumentation,
        )?;
        if let Some(p) = shadow {
            self.shadow.push(ShadowRecord {
                sample_id: p.sample_id,
                task_id: task_id.to_owned(),
                verify_seq: receipt.completed_seq,
                prediction: p.prediction,
                rule_hits: p.rule_hits,
            });
        }
        self.decisions.push(DecisionRecord {
            task_id: task_id.to_owned(),
            completed_seq: receipt.completed_seq,
            decision: receipt.decision.clone(),
        });
        Ok(receipt.decision)
    }

    pub fn recover(
        &mut self,
        task_id: &str,
        owner: &str,
        action: &str,
    ) -> Result<u64, RuntimeError> {
        let decision = self
            .decisions
            .iter()
            .rev()
            .find(|d| d.task_id == task_id)
            .map(|d| d.decision.clone())
            .ok_or_else(|| RuntimeError::NoRecovery(task_id.to_owned()))?;
        let draft = self.config.recovery.draft_for(&decision, owner, action);
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let cycle = enter_recovery(state, &decision, draft, &mut self.store, &mut self.ledger)?;
        let seq = cycle.opened_at_seq;
        self.cycles.insert(task_id.to_owned(), cycle);
        Ok(seq)
    }

    /// Closes the open cycle and re-verifies through the same path as a
    /// first verification, shadow hook included.
    pub fn close_and_reverify(&mut self, task_id: &str) -> Result<VerifyDecision, RuntimeError> {
        let mut cycle = self
            .cycles
            .remove(task_id)
            .ok_or_else(|| RuntimeError::NoRecovery(task_id.to_owned()))?;
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        next_state(state.branch, Trigger::plain(EventType::RecoveryClosed))?;
        let seq = self.ledger.last_seq() + 1;
        let closed = self.store.close_recovery(&cycle.recovery_packet_id, seq)?;
        let mut ev = state.event(&self.ledger, EventType::RecoveryClosed, COORDINATOR_ROLE);
        ev.recovery_packet_id = Some(closed.id.value.clone());
        cycle.closed_at_seq = Some(state.emit(&mut self.ledger, ev)?);
        state.risk.recovery_open = false;
        let tier = state.tier();
        self.verify_with(task_id, SkipFlag::none(), Some(tier))
    }

    fn terminal(
        &mut self,
        task_id: &str,
        t: EventType,
        detail: Option<&str>,
    ) -> Result<u64, RuntimeError> {
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let mut ev = state.event(&self.ledger, t, COORDINATOR_ROLE);
        ev.detail = detail.map(str::to_owned);
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    pub fn complete(&mut self, task_id: &str) -> Result<u64, RuntimeError> {
        self.terminal(task_id, EventType::TaskCompleted, None)
    }

    pub fn block(&mut self, task_id: &str, reason: &str) -> Result<u64, RuntimeError> {
        self.terminal(task_id, EventType::TaskBlocked, Some(reason))
    }

    pub fn fail(&mut self, task_id: &str, reason: &str) -> Result<u64, RuntimeError> {
        self.terminal(task_id, EventType::TaskFailed, Some(reason))
    }

    pub fn diagnostic_review(&mut self, task_id: &str) -> Result<u64, RuntimeError> {
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        let ev = state.event(&self.ledger, EventType::DiagnosticReview, DIAGNOSTIC_ROLE);
        Ok(state.emit(&mut self.ledger, ev)?)
    }

    pub fn escalate(&mut self, task_id: &str) -> Result<(), RuntimeError> {
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        escalate(state, &mut self.ledger)?;
        Ok(())
    }

    pub fn enqueue_rollback(
        &mut self,
        task_id: &str,
        trigger: RollbackTrigger,
    ) -> Result<RollbackQueueItem, RuntimeError> {
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        Ok(self
            .queue
            .enqueue(state, trigger, &self.store, &mut self.ledger)?)
    }

    pub fn review_rollback(
        &mut self,
        item_id: &str,
        reviewer: &str,
        decision: ReviewDecision,
    ) -> Result<RollbackQueueItem, RuntimeError> {
        let task_id = self
            .queue
            .get(item_id)
            .map(|i| i.task_id.clone())
            .ok_or_else(|| RecoveryError::UnknownItem(item_id.to_owned()))?;
        let state = self
            .tasks
            .get_mut(&task_id)
            .ok_or(RuntimeError::UnknownTask(task_id))?;
        let executor: &mut dyn RollbackExecutor = &mut self.executor;
        Ok(self.queue.review(
            item_id,
            reviewer,
            decision,
            executor,
            state,
            &mut self.ledger,
        )?)
    }

    /// Neutral header rows on a task, for event-volume shaping.
    pub fn pad(&mut self, task_id: &str, count: u64) -> Result<(), RuntimeError> {
        let state = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| RuntimeError::UnknownTask(task_id.to_owned()))?;
        for _ in 0..count {
            let mut ev = state.event(
                &self.ledger,
                EventType::ControlHeaderUpdated,
                COORDINATOR_ROLE,
            );
            ev.detail = Some("heartbeat".into());
            state.emit(&mut self.ledger, ev)?;
        }
        Ok(())
    }

    /// An orphan verify_completed row with no outcome, as left behind by a
    /// truncated write. It belongs to no task lifecycle.
    pub fn missing_outcome_artifact(
        &mut self,
        task_id: &str,
        session_id: &str,
        cluster_id: Option<&str>,
    ) -> Result<u64, RuntimeError> {
        let mut ev = Event::new(task_id, session_id, EventType::VerifyCompleted);
        ev.origin = Some(Origin::Synthetic);
        ev.cluster_id = cluster_id.map(str::to_owned);
        ev.detail = Some(MISSING_OUTCOME_ARTIFACT.into());
        Ok(self.ledger.append(ev)?)
    }

    pub fn rotate(&mut self) -> Result<(), RuntimeError> {
        self.ledger.rotate()?;
        Ok(())
    }

    /// Flushes the ledger and writes the store, shadow and queue files.
    pub fn write_artifacts(&mut self, dir: &Path) -> Result<(), RuntimeError> {
        self.ledger.flush()?;
        self.store.write_ndjson(&dir.join(STORE_FILE))?;
        write_jsonl(&dir.join(SHADOW_FILE), &self.shadow)?;
        self.queue.save(&dir.join(QUEUE_FILE))?;
        Ok(())
    }
}

//! Drives a script through the runtime coordinator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vgate_core::gate::{Instrumentation, SkipFlag, TraceScope};
use vgate_core::ids::IdGen;
use vgate_core::ledger::{EventType, Origin, Outcome};
use vgate_core::lifecycle::TaskRequest;
use vgate_core::packet::{
    AdvisorySeverity, AdvisorySignal, ClaimDraft, ClaimState, EvidenceDraft, EvidenceQuality,
    GroundUpdate, Tier,
};
use vgate_core::pgv::{write_jsonl, FinalizedOutcome};
use vgate_core::recovery::{ReviewDecision, RollbackTrigger};
use vgate_core::runtime::{Runtime, RuntimeConfig};

use crate::lanes::{LEAD_ROLE, REVIEWER_ROLE, WORKER_ROLE};
use crate::script::{ArtifactPlan, DrillExecution, DrillPlan, ScenarioScript, Step, TaskPlan};
use crate::spec::{Fault, ReasonDetail};
use crate::SimError;

pub const FINALIZED_FILE: &str = "finalized.jsonl";
pub const SCRIPT_FILE: &str = "script.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTIAL_MARKER: &str = "PARTIAL";

/// Repair attempts before a blocked task is left blocked.
const MAX_REPAIRS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub slice: Option<String>,
    pub steps: u64,
    pub events: u64,
    pub verify_rows: u64,
    pub segments: u64,
    pub shadow_samples: u64,
}

pub struct RunOutput {
    pub runtime: Runtime,
    pub finalized: Vec<FinalizedOutcome>,
    pub manifest: RunManifest,
}

pub fn run_id(seed: u64) -> String {
    format!("run-{seed:016x}")
}

/// Runs `script`. With `out`, ledger segments are written as they fill and
/// the remaining artifacts at the end; a failed run leaves a PARTIAL marker.
pub fn run_scenario(
    script: &ScenarioScript,
    config: &RuntimeConfig,
    out: Option<&Path>,
) -> Result<RunOutput, SimError> {
    let result = run_inner(script, config, out);
    if let (Err(e), Some(dir)) = (&result, out) {
        let _ = fs::write(dir.join(PARTIAL_MARKER), format!("{e}\n"));
    }
    result
}

fn run_inner(
    script: &ScenarioScript,
    config: &RuntimeConfig,
    out: Option<&Path>,
) -> Result<RunOutput, SimError> {
    let id = run_id(script.seed);
    let ids = IdGen::seeded(script.seed);
    let mut rt = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| SimError::Io(e.to_string()))?;
            let _ = fs::remove_file(dir.join(PARTIAL_MARKER));
            Runtime::create_dir(&id, dir, ids, config.clone())?
        }
        None => Runtime::new(&id, ids, config.clone()),
    };
    let mut comparable: BTreeMap<String, bool> = BTreeMap::new();
    let mut since_rotation = 0usize;
    for step in &script.steps {
        let before = rt.ledger.len();
        match step {
            Step::Task(p) => {
                comparable.insert(p.task_id.clone(), p.comparable);
                run_task(&mut rt, p)?;
            }
            Step::Drill(d) => {
                comparable.insert(d.task_id.clone(), d.comparable);
                run_drill(&mut rt, d)?;
            }
            Step::Artifact(a) => run_artifact(&mut rt, a)?,
        }
        since_rotation += rt.ledger.len() - before;
        if let Some(n) = script.rotate_every {
            if since_rotation as u64 >= n {
                rt.rotate()?;
                since_rotation = 0;
            }
        }
    }
    if let Some(pad) = &script.padding {
        apply_padding(&mut rt, script, pad.tier, pad.total_events)?;
    }

    let outcomes: BTreeMap<u64, Outcome> = rt
        .decisions()
        .iter()
        .map(|d| (d.completed_seq, d.decision.outcome))
        .collect();
    let finalized: Vec<FinalizedOutcome> = rt
        .shadow_records()
        .iter()
        .map(|r| FinalizedOutcome {
            sample_id: r.sample_id.clone(),
            outcome: outcomes[&r.verify_seq],
            comparable: comparable.get(&r.task_id).copied().unwrap_or(false),
        })
        .collect();
    let manifest = RunManifest {
        run_id: id,
        seed: script.seed,
        slice: script.slice.clone(),
        steps: script.steps.len() as u64,
        events: rt.ledger.len() as u64,
        verify_rows: rt
            .ledger
            .events()
            .filter(|e| e.event_type == EventType::VerifyCompleted)
            .count() as u64,
        segments: rt.ledger.segments().len() as u64,
        shadow_samples: rt.shadow_records().len() as u64,
    };
    if let Some(dir) = out {
        rt.write_artifacts(dir)?;
        write_jsonl(&dir.join(FINALIZED_FILE), &finalized)?;
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        fs::write(dir.join(SCRIPT_FILE), script.to_json() + "\n").map_err(io)?;
        let m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), m + "\n").map_err(io)?;
    }
    Ok(RunOutput {
        runtime: rt,
        finalized,
        manifest,
    })
}

fn request(task_id: &str, tier: Tier, task_class: &str) -> TaskRequest {
    TaskRequest {
        task_id: task_id.to_owned(),
        objective: format!("scripted change {task_id}"),
        criteria: vec!["acceptance checks pass".to_owned()],
        owner: WORKER_ROLE.to_owned(),
        accountable: LEAD_ROLE.to_owned(),
        task_class: task_class.to_owned(),
        hints: Vec::new(),
        single_step: false,
        tier_override: Some(tier),
    }
}

fn scope(session: &str, origin: Origin, cluster: &str) -> TraceScope {
    TraceScope {
        session_id: session.to_owned(),
        origin: Some(origin),
        cluster_id: Some(cluster.to_owned()),
        protocol_expected: None,
    }
}

fn evidence(quality: EvidenceQuality) -> EvidenceDraft {
    EvidenceDraft {
        supporting_refs: Vec::new(),
        missing_required: Vec::new(),
        quality,
        accepted_facts_cited: Vec::new(),
    }
}

fn clean_claim() -> ClaimDraft {
    ClaimDraft::done(WORKER_ROLE, LEAD_ROLE)
}

fn faulted_claim(fault: Option<Fault>) -> ClaimDraft {
    let mut c = clean_claim();
    match fault {
        Some(Fault::Phi2) => {
            c.claimed_state = ClaimState::Partial;
            c.fix_status = "partial".to_owned();
        }
        Some(Fault::Phi5) => c.accountable = "unassigned_lead".to_owned(),
        Some(Fault::Phi7) => c.unresolved_questions = vec!["which config wins?".to_owned()],
        _ => {}
    }
    c
}

fn wrong_mode(tier: Tier) -> Tier {
    match tier {
        Tier::Light => Tier::Standard,
        _ => Tier::Light,
    }
}

fn run_task(rt: &mut Runtime, p: &TaskPlan) -> Result<(), SimError> {
    let id = p.task_id.as_str();
    rt.ingest(
        &request(id, p.tier, &p.task_class),
        &scope(&p.session_id, p.origin, &p.cluster_id),
        p.under_pack,
    )?;
    if !p.reach_verify {
        return Ok(());
    }
    rt.config.instrumentation = match p.reason_detail {
        ReasonDetail::Full => Instrumentation::Full,
        ReasonDetail::Generic => Instrumentation::GenericBlockedReason,
    };
    rt.claim(id, faulted_claim(p.fault))?;
    match p.fault {
        Some(Fault::Phi4Absent) => {}
        Some(Fault::Phi4) => {
            rt.evidence(id, evidence(EvidenceQuality::Weak))?;
        }
        _ => {
            rt.evidence(id, evidence(EvidenceQuality::Adequate))?;
        }
    }
    if p.fault == Some(Fault::Phi6) {
        rt.refresh_ground(
            id,
            GroundUpdate {
                accepted_facts: Some(vec!["scope revised after claim".to_owned()]),
                ..GroundUpdate::default()
            },
        )?;
    }
    if p.fault == Some(Fault::Phi9) {
        rt.update_header(id, |h| {
            h.advisory_signals.push(AdvisorySignal {
                severity: AdvisorySeverity::Serious,
                treated: false,
                dismissed_under_policy: false,
            })
        })?;
    }
    if p.tier == Tier::Deep || p.diagnostic {
        rt.diagnostic_review(id)?;
    }
    rt.set_work_product(id, &format!("patch for {id}"));

    let mut decision = if p.skip_first {
        let d = rt.verify_with(
            id,
            SkipFlag::report_only("report-only pass"),
            Some(wrong_mode(p.tier)),
        )?;
        if d.outcome == Outcome::Skipped {
            rt.verify(id)?
        } else {
            d
        }
    } else if p.fault == Some(Fault::Phi3) {
        rt.verify_with(id, SkipFlag::none(), Some(wrong_mode(p.tier)))?
    } else {
        rt.verify(id)?
    };
    let mut repairs = 0u32;
    loop {
        match decision.outcome {
            Outcome::Success => {
                if p.complete {
                    rt.complete(id)?;
                }
                break;
            }
            Outcome::Skipped => decision = rt.verify(id)?,
            Outcome::Failed => {
                rt.fail(id, decision.blocked_reason_class.label())?;
                break;
            }
            Outcome::Blocked => {
                if p.unresolved || repairs >= MAX_REPAIRS {
                    rt.block(id, decision.blocked_reason_class.label())?;
                    break;
                }
                rt.recover(id, WORKER_ROLE, "repair claim and evidence")?;
                let short = p.repeat && repairs == 0;
                repair(rt, id, p.fault, short)?;
                decision = rt.close_and_reverify(id)?;
                repairs += 1;
            }
        }
    }
    rt.config.instrumentation = Instrumentation::Full;
    Ok(())
}

/// One repair pass. A short repair leaves the evidence weak.
fn repair(rt: &mut Runtime, id: &str, fault: Option<Fault>, short: bool) -> Result<(), SimError> {
    if fault == Some(Fault::Phi9) {
        rt.update_header(id, |h| {
            h.advisory_signals.iter_mut().for_each(|a| a.treated = true)
        })?;
    }
    rt.refresh_claim(id, clean_claim())?;
    let q = if short {
        EvidenceQuality::Weak
    } else {
        EvidenceQuality::Strong
    };
    rt.evidence(id, evidence(q))?;
    Ok(())
}

fn run_drill(rt: &mut Runtime, d: &DrillPlan) -> Result<(), SimError> {
    let id = d.task_id.as_str();
    rt.ingest(
        &request(id, d.tier, "drill"),
        &scope(&d.session_id, Origin::Synthetic, &d.cluster_id),
        true,
    )?;
    rt.claim(id, clean_claim())?;
    rt.evidence(id, evidence(EvidenceQuality::Adequate))?;
    rt.update_header(id, |h| h.veto_active = true)?;
    if d.tier == Tier::Deep {
        rt.diagnostic_review(id)?;
    }
    rt.set_work_product(id, &format!("patch for {id}"));
    let decision = rt.verify(id)?;
    if decision.outcome != Outcome::Failed {
        return Err(SimError::Scenario(format!(
            "drill {id} verified as {:?}",
            decision.outcome
        )));
    }
    rt.fail(id, decision.blocked_reason_class.label())?;
    let item = rt.enqueue_rollback(id, RollbackTrigger::ChallengeConfirmedInvalidity)?;
    let verdict = match d.execution {
        DrillExecution::Denied => ReviewDecision::Deny,
        DrillExecution::Failed => {
            rt.executor.failing.insert(id.to_owned());
            ReviewDecision::Approve
        }
        DrillExecution::Executed => ReviewDecision::Approve,
    };
    rt.review_rollback(&item.item_id, REVIEWER_ROLE, verdict)?;
    Ok(())
}

fn run_artifact(rt: &mut Runtime, a: &ArtifactPlan) -> Result<(), SimError> {
    rt.missing_outcome_artifact(&a.task_id, &a.session_id, Some(&a.cluster_id))?;
    Ok(())
}

/// Spreads neutral rows over the tier's tasks until the tier holds exactly
/// `total` events.
fn apply_padding(
    rt: &mut Runtime,
    script: &ScenarioScript,
    tier: Tier,
    total: u64,
) -> Result<(), SimError> {
    let have = rt.ledger.events().filter(|e| e.tier == Some(tier)).count() as u64;
    if have > total {
        return Err(SimError::Scenario(format!(
            "{} tier already holds {have} events, above the padding target {total}",
            tier.label()
        )));
    }
    let hosts: Vec<&str> = script
        .steps
        .iter()
        .filter_map(|s| match s {
            Step::Task(t) if t.tier == tier => Some(t.task_id.as_str()),
            Step::Drill(d) if d.tier == tier => Some(d.task_id.as_str()),
            _ => None,
        })
        .collect();
    let need = total - have;
    if need == 0 {
        return Ok(());
    }
    if hosts.is_empty() {
        return Err(SimError::Scenario(format!(
            "no {} task to pad",
            tier.label()
        )));
    }
    let n = hosts.len() as u64;
    for (i, host) in hosts.iter().enumerate() {
        let k = need / n + u64::from((i as u64) < need % n);
        rt.pad(host, k)?;
    }
    Ok(())
}

use std::path::PathBuf;

use vgate_core::accounting::{
    case_table, concentration, production_split, subset_accounting, tier_overhead_proxy,
    verify_success_share, CaseClass, SharePolicy, VerifySlice,
};
use vgate_core::ledger::{replay_accounting, ReplayOptions};
use vgate_core::packet::{ProcedurePack, Tier};
use vgate_core::pgv::shadow_evaluate;
use vgate_core::runtime::{RuntimeConfig, PACK_ID};
use vgate_sim::{generate_workload, run_scenario, LaneRegistry, RunOutput, WorkloadSpec};

fn fixture(name: &str) -> WorkloadSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    WorkloadSpec::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run(name: &str) -> RunOutput {
    let spec = fixture(name);
    let script = generate_workload(&spec).unwrap();
    let config = RuntimeConfig {
        shadow: true,
        ..RuntimeConfig::default()
    };
    run_scenario(&script, &config, None).unwrap()
}

fn slice(out: &RunOutput) -> VerifySlice {
    let label = out.manifest.slice.clone().unwrap();
    VerifySlice::from_events(&label, out.runtime.ledger.events())
}

fn identity_everywhere(out: &RunOutput) {
    let pack = ProcedurePack::canonical(PACK_ID);
    let events = out.runtime.ledger.snapshot();
    for s in out.runtime.ledger.sessions() {
        let session: Vec<_> = out.runtime.ledger.reconstruct(&s);
        let r = replay_accounting(&session, &s, &pack, ReplayOptions::default()).unwrap();
        assert!(r.identity_holds, "{r:?}");
    }
    assert!(LaneRegistry::default().violations(&events).is_empty());
}

#[test]
fn rotation_aware_fixture() {
    let out = run("rotation_aware.spec");
    let s = slice(&out);
    let known = verify_success_share(&s, SharePolicy::KnownOutcome).unwrap();
    let all = verify_success_share(&s, SharePolicy::AllRow).unwrap();
    assert_eq!(known.share.to_string(), "1791/1800 = 99.5%");
    assert_eq!(all.share.to_string(), "1791/1801 = 99.44%");
    let split = production_split(&s).unwrap();
    assert_eq!(
        (
            split.production.total,
            split.production.success,
            split.production.blocked
        ),
        (17, 9, 8)
    );
    let syn = split.synthetic_session;
    assert_eq!(
        (syn.total, syn.success, syn.failed, syn.missing),
        (1784, 1782, 1, 1)
    );
    let c = concentration(&s);
    assert_eq!(
        (c.top_cluster_rows, c.total_rows, c.outside_rows),
        (1762, 1801, 39)
    );
    let sub = subset_accounting(out.runtime.ledger.events());
    assert_eq!(sub.production_task_ids, 69);
    assert_eq!(sub.with_verify.to_string(), "11/69 = 15.9%");
    assert_eq!(sub.completed, 4);
    assert_eq!(
        (
            sub.completed_with_verify.numerator,
            sub.completed_with_verify.denominator
        ),
        (4, 4)
    );
    assert!(out.runtime.ledger.segments().len() > 1);
    identity_everywhere(&out);
}

#[test]
fn historical_fixture() {
    let out = run("historical_active.spec");
    let s = slice(&out);
    let cases = case_table(&s).unwrap();
    let count = |c: CaseClass| cases.iter().filter(|r| r.classification == c).count();
    assert_eq!(cases.len(), 9);
    assert_eq!(count(CaseClass::BlockedProduction), 7);
    assert_eq!(count(CaseClass::FailedSyntheticDrill), 1);
    assert_eq!(count(CaseClass::MissingOutcomeArtifact), 1);
    assert!(cases
        .iter()
        .filter(|r| r.classification == CaseClass::BlockedProduction)
        .all(|r| r.blocked_reason.as_deref() == Some("verify_blocked")));
    let proxy = tier_overhead_proxy(out.runtime.ledger.events());
    let std_row = proxy
        .tiers
        .iter()
        .find(|t| t.tier == Tier::Standard)
        .unwrap();
    assert_eq!(std_row.ratio.to_string(), "785/8240 = 9.5%");
    assert_eq!(proxy.unknown.verify_rows, 1);
    identity_everywhere(&out);
}

#[test]
fn pgv_fixture() {
    let out = run("pgv.spec");
    let preds: Vec<_> = out
        .runtime
        .shadow_records()
        .iter()
        .map(|r| r.to_prediction())
        .collect();
    let e = shadow_evaluate(&preds, &out.finalized).unwrap();
    assert_eq!(e.denominators.n_all, 2044);
    assert_eq!(e.rule_agreement.to_string(), "1526/1548 = 98.58%");
    assert_eq!(e.false_success.to_string(), "0/1526 = 0.0%");
    assert_eq!(e.blocked_precision.to_string(), "2/518 = 0.39%");
    assert_eq!(
        (
            e.blocked_recall_note.predicted_blocked,
            e.blocked_recall_note.actual_blocked
        ),
        (2, 2)
    );
    identity_everywhere(&out);
}

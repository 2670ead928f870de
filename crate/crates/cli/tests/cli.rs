use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vgate_core::gate::TraceScope;
use vgate_core::ids::IdGen;
use vgate_core::ledger::{EventType, Ledger, Origin};
use vgate_core::lifecycle::TaskRequest;
use vgate_core::packet::{ClaimDraft, EvidenceDraft, EvidenceQuality};
use vgate_core::recovery::RollbackTrigger;
use vgate_core::runtime::{Runtime, RuntimeConfig, LEDGER_DIR};
use vgate_sim::run::{RunManifest, MANIFEST_FILE};

fn vgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgate"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn request(id: &str) -> TaskRequest {
    TaskRequest {
        task_id: id.into(),
        objective: "rename config key".into(),
        criteria: vec!["old key still read".into()],
        owner: "worker".into(),
        accountable: "lead".into(),
        task_class: "change".into(),
        hints: vec![],
        single_step: false,
        tier_override: None,
    }
}

fn evidence(quality: EvidenceQuality) -> EvidenceDraft {
    EvidenceDraft {
        supporting_refs: vec![],
        missing_required: vec![],
        quality,
        accepted_facts_cited: vec![],
    }
}

/// A run directory with one claimed task per entry of `quality`, none verified.
fn claimed_run(dir: &Path, quality: &[EvidenceQuality]) -> Runtime {
    let mut rt =
        Runtime::create_dir("run-test", dir, IdGen::seeded(5), RuntimeConfig::default()).unwrap();
    let scope = TraceScope {
        session_id: "S-0001".into(),
        origin: Some(Origin::Production),
        cluster_id: Some("C-01".into()),
        protocol_expected: None,
    };
    for (i, q) in quality.iter().enumerate() {
        let id = format!("T-{i}");
        rt.ingest(&request(&id), &scope, true).unwrap();
        rt.claim(&id, ClaimDraft::done("worker", "lead")).unwrap();
        rt.evidence(&id, evidence(*q)).unwrap();
    }
    rt
}

fn finish(mut rt: Runtime, dir: &Path) {
    rt.write_artifacts(dir).unwrap();
    let manifest = RunManifest {
        run_id: "run-test".into(),
        seed: 5,
        slice: Some("rotation-aware".into()),
        steps: 0,
        events: rt.ledger.len() as u64,
        verify_rows: 0,
        segments: 1,
        shadow_samples: 0,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string(&manifest).unwrap(),
    )
    .unwrap();
}

#[test]
fn verify_admits_a_ready_claim_and_refuses_a_second_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    finish(claimed_run(dir, &[EvidenceQuality::Adequate]), dir);
    let run = dir.to_str().unwrap();

    let o = vgate(&["verify", "--run", run, "--task", "T-0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(d["outcome"], "success");
    assert_eq!(d["acceptance_status"], "accepted");

    let ledger = Ledger::open_dir(&dir.join(LEDGER_DIR)).unwrap();
    let last: Vec<EventType> = ledger
        .events()
        .rev()
        .take(2)
        .map(|e| e.event_type)
        .collect();
    assert_eq!(last, [EventType::VerifyCompleted, EventType::VerifyStarted]);

    assert_eq!(
        vgate(&["verify", "--run", run, "--task", "T-0"])
            .status
            .code(),
        Some(3)
    );
    // the terminal slot is still open
    let o = vgate(&["replay-check", "--run", run]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stdout(&o).contains("observed 5\texpected 6"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn weak_evidence_is_blocked_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    finish(
        claimed_run(dir, &[EvidenceQuality::Weak, EvidenceQuality::Strong]),
        dir,
    );
    let run = dir.to_str().unwrap();
    for task in ["T-0", "T-1"] {
        assert!(vgate(&["verify", "--run", run, "--task", task])
            .status
            .success());
    }
    let text = stdout(&vgate(&["account", "--run", run, "--report", "verify"]));
    assert!(text.contains("known_outcome_share 1/2 = 50.0%"), "{text}");
    let split = stdout(&vgate(&["account", "--run", run, "--report", "split"]));
    assert!(
        split.contains("production 2 (success 1, blocked 1"),
        "{split}"
    );
}

#[test]
fn rollback_review_through_the_queue() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut rt = claimed_run(dir, &[EvidenceQuality::Weak]);
    rt.verify("T-0").unwrap();
    rt.block("T-0", "evidence_floor_failed").unwrap();
    let item = rt
        .enqueue_rollback("T-0", RollbackTrigger::WeakEvidencePostClaim)
        .unwrap();
    finish(rt, dir);
    let run = dir.to_str().unwrap();

    let list = stdout(&vgate(&["rollback-queue", "--run", run, "list"]));
    assert!(
        list.contains(&item.item_id) && list.contains("pending_review"),
        "{list}"
    );

    let o = vgate(&[
        "rollback-queue",
        "--run",
        run,
        "approve",
        "--item",
        &item.item_id,
        "--reviewer",
        "ops_reviewer",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("executed_success"));

    let ledger = Ledger::open_dir(&dir.join(LEDGER_DIR)).unwrap();
    let tail: Vec<EventType> = ledger
        .events()
        .rev()
        .take(2)
        .map(|e| e.event_type)
        .collect();
    assert_eq!(
        tail,
        [EventType::RollbackExecuted, EventType::RollbackReviewed]
    );
    assert_eq!(
        vgate(&["replay-check", "--run", run]).status.code(),
        Some(0)
    );

    // reviewed items cannot be reviewed again
    let again = vgate(&[
        "rollback-queue",
        "--run",
        run,
        "deny",
        "--item",
        &item.item_id,
        "--reviewer",
        "ops_reviewer",
    ]);
    assert_eq!(again.status.code(), Some(3));
}

#[test]
fn dropped_verify_row_breaks_the_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut rt = claimed_run(dir, &[EvidenceQuality::Adequate]);
    rt.verify("T-0").unwrap();
    finish(rt, dir);
    let active = dir.join(LEDGER_DIR).join(vgate_core::ledger::ACTIVE_FILE);
    let text = fs::read_to_string(&active).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| !l.contains("\"verify_started\""))
        .collect();
    assert!(kept.len() < text.lines().count());
    fs::write(&active, kept.join("\n") + "\n").unwrap();

    let o = vgate(&["replay-check", "--run", dir.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("BROKEN"));
}

#[test]
fn pgv_eval_reports_denominators_and_flags_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("p.jsonl");
    let fin = tmp.path().join("f.jsonl");
    fs::write(
        &preds,
        concat!(
            r#"{"sample_id":"a","prediction":"safe_to_proceed","rule_hits":[]}"#,
            "\n",
            r#"{"sample_id":"b","prediction":"blocked_risky","rule_hits":["claim_absent"]}"#,
            "\n"
        ),
    )
    .unwrap();
    fs::write(
        &fin,
        concat!(
            r#"{"sample_id":"a","outcome":"success","comparable":true}"#,
            "\n",
            r#"{"sample_id":"b","outcome":"blocked","comparable":true}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = vgate(&[
        "pgv-eval",
        "--predictions",
        preds.to_str().unwrap(),
        "--finalized",
        fin.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("rule_agreement 2/2 = 100.00%"), "{text}");
    assert!(text.contains("false_success 0/1 = 0.0%"), "{text}");
    assert!(text.contains("blocked_recall 1/1"), "{text}");

    fs::write(
        &fin,
        r#"{"sample_id":"zz","outcome":"success","comparable":true}"#,
    )
    .unwrap();
    let o = vgate(&[
        "pgv-eval",
        "--predictions",
        preds.to_str().unwrap(),
        "--finalized",
        fin.to_str().unwrap(),
    ]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn bad_inputs_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[recovery]\nmax_retries = 0\n").unwrap();
    assert_eq!(
        vgate(&["--config", cfg.to_str().unwrap(), "transitions"])
            .status
            .code(),
        Some(3)
    );
    fs::write(&cfg, "[gaet]\n").unwrap();
    assert_eq!(
        vgate(&["--config", cfg.to_str().unwrap(), "transitions"])
            .status
            .code(),
        Some(3)
    );
    let spec = tmp.path().join("bad.spec");
    fs::write(
        &spec,
        "seed = 1\ntask_count = 3\n[tier_mix]\nstandard = \"1/2\"\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = vgate(&[
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn simulate_is_reproducible_and_seed_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("small.spec");
    fs::write(&spec, "seed = 4\ntask_count = 12\nrollback_drills = 1\n").unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "simulate",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert!(vgate(&args).status.success());
        fs::read(out.join(LEDGER_DIR).join(vgate_core::ledger::ACTIVE_FILE)).unwrap()
    };
    let a = run("a", None);
    assert_eq!(a, run("b", None));
    assert_ne!(a, run("c", Some("5")));
}

#[test]
fn transitions_prints_the_table() {
    let o = vgate(&["transitions"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("from\ttrigger\tto\n"));
    assert!(text.contains("verify_pending\tverify_completed(success)\tverified_success"));
}

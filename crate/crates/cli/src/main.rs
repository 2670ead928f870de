use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use vgate_core::accounting::{
    case_table, concentration, denominator_map, production_split, subset_accounting,
    tier_overhead_proxy, verify_success_share, SharePolicy, VerifySlice,
};
use vgate_core::gate::SkipFlag;
use vgate_core::ids::IdGen;
use vgate_core::ledger::{replay_accounting, Ledger, ReplayOptions};
use vgate_core::lifecycle::{transition_table_tsv, TaskState};
use vgate_core::packet::{PacketStore, ProcedurePack};
use vgate_core::pgv::{read_jsonl, shadow_evaluate, FinalizedOutcome, PgvError, PgvPrediction};
use vgate_core::recovery::{ReviewDecision, RollbackQueue, RollbackStatus, SimulatedExecutor};
use vgate_core::runtime::{RuntimeConfig, LEDGER_DIR, PACK_ID, QUEUE_FILE, STORE_FILE};
use vgate_sim::run::{RunManifest, MANIFEST_FILE};
use vgate_sim::{generate_workload, run_scenario, WorkloadSpec};

const EXIT_MISMATCH: u8 = 2;
const EXIT_INVALID: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vgate",
    version,
    about = "Verify-gated completion admission kernel"
)]
struct Cli {
    /// TOML file with [gate] and [recovery] policy tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload from a spec and run it.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip shadow PGV records.
        #[arg(long)]
        no_shadow: bool,
    },
    /// Run the gate on one task of a stored run.
    Verify {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        task: String,
        /// Mark the verification report-only.
        #[arg(long)]
        skip_reason: Option<String>,
    },
    /// Denominator-explicit reports over a stored run.
    Account {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Report::Verify)]
        report: Report,
        /// Slice label; defaults to the run's own.
        #[arg(long)]
        slice: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Score shadow predictions against finalized outcomes.
    PgvEval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        finalized: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check the replay-accounting identity per session.
    ReplayCheck {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        session: Option<String>,
        #[arg(long)]
        ex_ante: bool,
    },
    /// Inspect and review queued rollbacks.
    RollbackQueue {
        #[arg(long)]
        run: PathBuf,
        #[command(subcommand)]
        action: QueueAction,
    },
    /// Print the legal transition table.
    Transitions,
}

#[derive(Subcommand)]
enum QueueAction {
    List,
    Approve {
        #[arg(long)]
        item: String,
        #[arg(long)]
        reviewer: String,
    },
    Deny {
        #[arg(long)]
        item: String,
        #[arg(long)]
        reviewer: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Verify,
    Split,
    Concentration,
    Subset,
    Cases,
    Tiers,
}

enum Failure {
    Mismatch(String),
    Invalid(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(msg)) => {
            eprintln!("mismatch: {msg}");
            ExitCode::from(EXIT_MISMATCH)
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RuntimeConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RuntimeConfig::from_toml(&text)?)
        }
        None => Ok(RuntimeConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate {
            spec,
            seed,
            out,
            no_shadow,
        } => simulate(&spec, seed, &out, no_shadow, config)?,
        Command::Verify {
            run,
            task,
            skip_reason,
        } => verify(&run, &task, skip_reason, &config)?,
        Command::Account {
            run,
            report,
            slice,
            json,
        } => account(&run, report, slice, json)?,
        Command::PgvEval {
            predictions,
            finalized,
            json,
        } => return pgv_eval(&predictions, &finalized, json),
        Command::ReplayCheck {
            run,
            session,
            ex_ante,
        } => return replay_check(&run, session, ex_ante),
        Command::RollbackQueue { run, action } => rollback_queue(&run, action)?,
        Command::Transitions => print!("{}", transition_table_tsv()),
    }
    Ok(())
}

fn simulate(
    spec_path: &Path,
    seed: Option<u64>,
    out: &Path,
    no_shadow: bool,
    mut config: RuntimeConfig,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec = WorkloadSpec::from_toml(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    config.shadow = !no_shadow;
    let script = generate_workload(&spec)?;
    let result = run_scenario(&script, &config, Some(out))?;
    let m = &result.manifest;
    println!("run {} seed {}", m.run_id, m.seed);
    println!(
        "steps {} events {} verify_rows {}",
        m.steps, m.events, m.verify_rows
    );
    println!(
        "segments {} shadow_samples {}",
        m.segments, m.shadow_samples
    );
    println!("written to {}", out.display());
    Ok(())
}

fn manifest(run: &Path) -> anyhow::Result<RunManifest> {
    let path = run.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn open_ledger(run: &Path) -> anyhow::Result<Ledger> {
    let dir = run.join(LEDGER_DIR);
    if !dir.is_dir() {
        bail!("{} has no ledger directory", run.display());
    }
    Ok(Ledger::open_dir(&dir)?)
}

fn open_store(run: &Path, ids: IdGen) -> anyhow::Result<PacketStore> {
    Ok(PacketStore::read_ndjson(&run.join(STORE_FILE), ids)?)
}

fn verify(
    run: &Path,
    task: &str,
    skip_reason: Option<String>,
    config: &RuntimeConfig,
) -> anyhow::Result<()> {
    let m = manifest(run)?;
    let mut ledger = open_ledger(run)?;
    let mut store = open_store(run, IdGen::seeded(m.seed ^ ledger.last_seq()))?;
    let mut state = TaskState::from_ledger(task, &ledger, &store)?;
    let skip = skip_reason
        .map(|r| SkipFlag::report_only(&r))
        .unwrap_or_else(SkipFlag::none);
    let receipt = state.run_verification(
        &mut store,
        &mut ledger,
        &config.gate,
        &config.recovery,
        skip,
        config.instrumentation,
    )?;
    ledger.flush()?;
    store.write_ndjson(&run.join(STORE_FILE))?;
    println!("{}", serde_json::to_string_pretty(&receipt.decision)?);
    Ok(())
}

fn account(run: &Path, report: Report, slice: Option<String>, json: bool) -> anyhow::Result<()> {
    let ledger = open_ledger(run)?;
    let label = match slice {
        Some(s) => s,
        None => manifest(run)?
            .slice
            .ok_or_else(|| anyhow!("run has no slice label; pass --slice"))?,
    };
    let s = VerifySlice::from_events(&label, ledger.events());
    let emit = |v: serde_json::Value, text: String| {
        if json {
            println!(
                "{}",
                serde_json::to_string_pretty(&v).expect("reports serialize")
            );
        } else {
            print!("{text}");
        }
    };
    match report {
        Report::Verify => {
            let known = verify_success_share(&s, SharePolicy::KnownOutcome)?;
            let all = verify_success_share(&s, SharePolicy::AllRow)?;
            let d = denominator_map(&s)?;
            let text = format!(
                "slice {label}\nknown_outcome_share {}\nall_row_share {}\nrows {} known {} missing {}\n",
                known.share, all.share, d.all_rows, d.known_outcome_rows, d.missing_outcome_rows
            );
            emit(
                serde_json::json!({"known_outcome": known, "all_row": all, "denominators": d}),
                text,
            );
        }
        Report::Split => {
            let sp = production_split(&s)?;
            let h = |x: &vgate_core::accounting::OutcomeHistogram| {
                format!(
                    "{} (success {}, blocked {}, failed {}, skipped {}, missing {})",
                    x.total, x.success, x.blocked, x.failed, x.skipped, x.missing
                )
            };
            let text = format!(
                "slice {label}\nproduction {}\nsynthetic_session {}\n",
                h(&sp.production),
                h(&sp.synthetic_session)
            );
            emit(serde_json::to_value(&sp)?, text);
        }
        Report::Concentration => {
            let c = concentration(&s);
            let text = format!(
                "slice {label}\ntop_cluster {} {}\noutside {}\n",
                c.top_cluster.as_deref().unwrap_or("-"),
                c.share,
                c.outside_rows
            );
            emit(serde_json::to_value(&c)?, text);
        }
        Report::Subset => {
            let r = subset_accounting(ledger.events());
            let text = format!(
                "production_task_ids {}\nwith_verify {}\ncompleted {}\ncompleted_with_verify {}\nnote {}\n",
                r.production_task_ids, r.with_verify, r.completed, r.completed_with_verify, r.note
            );
            emit(serde_json::to_value(&r)?, text);
        }
        Report::Cases => {
            let rows = case_table(&s)?;
            let mut text = format!("slice {label}\ncases {}\n", rows.len());
            for r in &rows {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    r.seq,
                    r.task_id,
                    r.classification.label(),
                    r.blocked_reason.as_deref().unwrap_or("-")
                ));
            }
            emit(serde_json::to_value(&rows)?, text);
        }
        Report::Tiers => {
            let r = tier_overhead_proxy(ledger.events());
            let mut text = String::new();
            for t in &r.tiers {
                text.push_str(&format!("{}\t{}\n", t.tier.label(), t.ratio));
            }
            text.push_str(&format!(
                "unknown\tverify_rows {} events {}\n",
                r.unknown.verify_rows, r.unknown.total_events
            ));
            emit(serde_json::to_value(&r)?, text);
        }
    }
    Ok(())
}

fn pgv_eval(predictions: &Path, finalized: &Path, json: bool) -> Result<(), Failure> {
    let preds: Vec<PgvPrediction> =
        read_jsonl(predictions).map_err(|e| Failure::Invalid(e.into()))?;
    let fins: Vec<FinalizedOutcome> =
        read_jsonl(finalized).map_err(|e| Failure::Invalid(e.into()))?;
    let e = match shadow_evaluate(&preds, &fins) {
        Ok(e) => e,
        Err(err @ PgvError::DenominatorMismatch { .. }) => {
            return Err(Failure::Mismatch(err.to_string()))
        }
        Err(err) => return Err(Failure::Invalid(err.into())),
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&e).map_err(|e| Failure::Invalid(e.into()))?
        );
        return Ok(());
    }
    let d = e.denominators;
    println!(
        "n_all {} n_final {} n_safe_pred {} n_blocked_pred {}",
        d.n_all, d.n_final, d.n_safe_pred, d.n_blocked_pred
    );
    println!("rule_agreement {}", e.rule_agreement);
    println!("false_success {}", e.false_success);
    println!("blocked_precision {}", e.blocked_precision);
    let r = e.blocked_recall_note;
    println!(
        "blocked_recall {}/{} (counts only, not an estimate)",
        r.predicted_blocked, r.actual_blocked
    );
    Ok(())
}

fn replay_check(run: &Path, session: Option<String>, ex_ante: bool) -> Result<(), Failure> {
    let ledger = open_ledger(run)?;
    let pack = ProcedurePack::canonical(PACK_ID);
    let sessions = match session {
        Some(s) => vec![s],
        None => ledger.sessions(),
    };
    let mut failed = Vec::new();
    for s in &sessions {
        let events = ledger.reconstruct(s);
        if events.is_empty() {
            return Err(Failure::Invalid(anyhow!("no events for session {s}")));
        }
        let r = replay_accounting(
            &events,
            s,
            &pack,
            ReplayOptions {
                ex_ante_minimal: ex_ante,
            },
        )
        .map_err(|e| Failure::Invalid(e.into()))?;
        let minimal = r
            .ex_ante_minimal_events
            .map(|n| format!(" ex_ante_minimal {n}"))
            .unwrap_or_default();
        println!(
            "{}\tobserved {}\texpected {}\t{}{}",
            s,
            r.observed_session_events,
            r.expected_events,
            if r.identity_holds { "holds" } else { "BROKEN" },
            minimal
        );
        if !r.identity_holds {
            failed.push(s.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Mismatch(format!(
            "identity broken in {}",
            failed.join(", ")
        )))
    }
}

fn status_label(status: RollbackStatus) -> String {
    serde_json::to_value(status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn rollback_queue(run: &Path, action: QueueAction) -> anyhow::Result<()> {
    let path = run.join(QUEUE_FILE);
    let mut queue = RollbackQueue::load(&path)?;
    let (item, reviewer, decision) = match action {
        QueueAction::List => {
            for i in queue.items() {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    i.item_id,
                    i.task_id,
                    i.trigger,
                    status_label(i.status),
                    i.reviewer.as_deref().unwrap_or("-")
                );
            }
            return Ok(());
        }
        QueueAction::Approve { item, reviewer } => (item, reviewer, ReviewDecision::Approve),
        QueueAction::Deny { item, reviewer } => (item, reviewer, ReviewDecision::Deny),
    };
    let task = queue
        .get(&item)
        .map(|i| i.task_id.clone())
        .ok_or_else(|| anyhow!("unknown queue item {item}"))?;
    let m = manifest(run)?;
    let mut ledger = open_ledger(run)?;
    let store = open_store(run, IdGen::seeded(m.seed ^ ledger.last_seq()))?;
    let mut state = TaskState::from_ledger(&task, &ledger, &store)?;
    let mut executor = SimulatedExecutor::default();
    let done = queue.review(
        &item,
        &reviewer,
        decision,
        &mut executor,
        &mut state,
        &mut ledger,
    )?;
    ledger.flush()?;
    queue.save(&path)?;
    println!(
        "{}\t{}\t{}",
        done.item_id,
        status_label(done.status),
        reviewer
    );
    Ok(())
}

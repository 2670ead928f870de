//! Shadow advisory verifier. Audits the gate's fail-closed preconditions and
//! never decides admission. Scoring keeps one denominator per ratio.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::Share;
use crate::gate::{GatePolicy, VerifyContext};
use crate::ledger::Outcome;
use crate::packet::{ClaimState, FreshnessVerdict};

#[derive(Debug, Error)]
pub enum PgvError {
    #[error("prediction partition {safe} + {blocked} does not equal {all}")]
    DenominatorMismatch { all: u64, safe: u64, blocked: u64 },
    #[error("finalized sample {0} has no prediction")]
    UnknownSample(String),
    #[error("duplicate sample {0}")]
    DuplicateSample(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    SafeToProceed,
    BlockedRisky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgvRule {
    OwnershipUnpopulated,
    ClaimAbsent,
    EvidenceAbsent,
    PartialSurfacedAsDone,
    UnclearWithoutDiagnostic,
    StaleGround,
    ActiveRecovery,
}

impl PgvRule {
    pub const ALL: [PgvRule; 7] = [
        PgvRule::OwnershipUnpopulated,
        PgvRule::ClaimAbsent,
        PgvRule::EvidenceAbsent,
        PgvRule::PartialSurfacedAsDone,
        PgvRule::UnclearWithoutDiagnostic,
        PgvRule::StaleGround,
        PgvRule::ActiveRecovery,
    ];

    /// Gate predicate this rule audits, if any.
    pub fn audited_predicate(self) -> Option<usize> {
        match self {
            PgvRule::OwnershipUnpopulated => Some(5),
            PgvRule::ClaimAbsent | PgvRule::PartialSurfacedAsDone => Some(2),
            PgvRule::EvidenceAbsent => Some(4),
            PgvRule::UnclearWithoutDiagnostic => None,
            PgvRule::StaleGround => Some(6),
            PgvRule::ActiveRecovery => Some(10),
        }
    }
}

pub const AUDITED_PREDICATES: [usize; 5] = [2, 4, 5, 6, 10];

/// Task class that marks an unclear request.
pub const UNCLEAR_TASK_CLASS: &str = "unclear";

const UNFIXED_STATUSES: [&str; 3] = ["partial", "not_fixed", "unfixed"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PgvPrediction {
    pub sample_id: String,
    pub prediction: Prediction,
    pub rule_hits: Vec<PgvRule>,
}

pub fn pgv_check(sample_id: &str, ctx: &VerifyContext, policy: &GatePolicy) -> PgvPrediction {
    let h = &ctx.header;
    let claim = ctx.claim.as_ref();
    let mut hits = Vec::new();

    let owners_split = claim.is_some_and(|c| c.owner != h.owner || c.accountable != h.accountable);
    if !h.is_complete() || owners_split {
        hits.push(PgvRule::OwnershipUnpopulated);
    }
    if claim.is_none() {
        hits.push(PgvRule::ClaimAbsent);
    }
    let evidence_ok = ctx
        .evidence
        .as_ref()
        .is_some_and(|e| e.missing_required.is_empty() && e.quality >= policy.evidence_floor);
    if !evidence_ok {
        hits.push(PgvRule::EvidenceAbsent);
    }
    if let Some(c) = claim {
        let unfixed = UNFIXED_STATUSES.contains(&c.fix_status.as_str());
        if c.claimed_state != ClaimState::Done || unfixed {
            hits.push(PgvRule::PartialSurfacedAsDone);
        }
    }
    if h.task_class == UNCLEAR_TASK_CLASS && !ctx.diagnostic_review_seen {
        hits.push(PgvRule::UnclearWithoutDiagnostic);
    }
    if (claim.is_some() && ctx.freshness != Some(FreshnessVerdict::Fresh)) || h.stale_ground {
        hits.push(PgvRule::StaleGround);
    }
    if ctx.recovery_open {
        hits.push(PgvRule::ActiveRecovery);
    }

    PgvPrediction {
        sample_id: sample_id.to_owned(),
        prediction: if hits.is_empty() {
            Prediction::SafeToProceed
        } else {
            Prediction::BlockedRisky
        },
        rule_hits: hits,
    }
}

/// One shadow evaluation, stored apart from the verify events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub sample_id: String,
    pub task_id: String,
    pub verify_seq: u64,
    pub prediction: Prediction,
    pub rule_hits: Vec<PgvRule>,
}

impl ShadowRecord {
    pub fn to_prediction(&self) -> PgvPrediction {
        PgvPrediction {
            sample_id: self.sample_id.clone(),
            prediction: self.prediction,
            rule_hits: self.rule_hits.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalizedOutcome {
    pub sample_id: String,
    pub outcome: Outcome,
    /// Member of the comparable finalized-outcome subset.
    pub comparable: bool,
}

impl FinalizedOutcome {
    pub fn is_bad(&self) -> bool {
        self.outcome != Outcome::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PgvDenominatorMap {
    pub n_all: u64,
    pub n_final: u64,
    pub n_safe_pred: u64,
    pub n_blocked_pred: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallNote {
    pub predicted_blocked: u64,
    pub actual_blocked: u64,
    pub estimative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PgvEvaluation {
    pub denominators: PgvDenominatorMap,
    pub rule_agreement: Share,
    pub false_success: Share,
    pub blocked_precision: Share,
    pub blocked_recall_note: RecallNote,
}

pub fn shadow_evaluate(
    predictions: &[PgvPrediction],
    finalized: &[FinalizedOutcome],
) -> Result<PgvEvaluation, PgvError> {
    let mut by_id: BTreeMap<&str, Prediction> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(&p.sample_id, p.prediction).is_some() {
            return Err(PgvError::DuplicateSample(p.sample_id.clone()));
        }
    }
    let n_all = predictions.len() as u64;
    let n_safe = by_id
        .values()
        .filter(|p| **p == Prediction::SafeToProceed)
        .count() as u64;
    let n_blocked = by_id
        .values()
        .filter(|p| **p == Prediction::BlockedRisky)
        .count() as u64;
    check_partition(n_all, n_safe, n_blocked)?;

    let mut seen = BTreeSet::new();
    let (mut n_final, mut agree, mut false_success, mut true_blocked) = (0u64, 0u64, 0u64, 0u64);
    let mut actual_blocked = 0u64;
    for f in finalized {
        let p = *by_id
            .get(f.sample_id.as_str())
            .ok_or_else(|| PgvError::UnknownSample(f.sample_id.clone()))?;
        if !seen.insert(f.sample_id.as_str()) {
            return Err(PgvError::DuplicateSample(f.sample_id.clone()));
        }
        let blocked = p == Prediction::BlockedRisky;
        if f.comparable {
            n_final += 1;
            agree += (blocked == f.is_bad()) as u64;
        }
        if f.is_bad() {
            actual_blocked += 1;
            if blocked {
                true_blocked += 1;
            } else {
                false_success += 1;
            }
        }
    }
    Ok(PgvEvaluation {
        denominators: PgvDenominatorMap {
            n_all,
            n_final,
            n_safe_pred: n_safe,
            n_blocked_pred: n_blocked,
        },
        rule_agreement: Share::new(agree, n_final, 2),
        false_success: Share::new(false_success, n_safe, 1),
        blocked_precision: Share::new(true_blocked, n_blocked, 2),
        blocked_recall_note: RecallNote {
            predicted_blocked: true_blocked,
            actual_blocked,
            estimative: false,
        },
    })
}

pub fn check_partition(all: u64, safe: u64, blocked: u64) -> Result<(), PgvError> {
    if safe + blocked != all {
        return Err(PgvError::DenominatorMismatch { all, safe, blocked });
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PgvError> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PgvError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PgvError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| PgvError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

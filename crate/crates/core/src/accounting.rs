//! Denominator-explicit metrics over verify_completed slices.
//!
//! Every figure is a stored numerator and denominator. Rendering is half-up
//! at a fixed number of decimals, computed in integers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{Event, EventType, Origin, Outcome};
use crate::packet::Tier;

pub const HISTORICAL_ACTIVE: &str = "historical-active";
pub const ROTATION_AWARE: &str = "rotation-aware";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccountingError {
    #[error("slice is empty")]
    EmptySlice,
    #[error("row {0} is not a verify_completed event")]
    NotVerifyRow(u64),
    #[error("row {0} has no origin")]
    MissingOrigin(u64),
    #[error("slices {0:?} and {1:?} cannot be combined")]
    SliceMismatch(String, String),
    #[error("report needs the {expected:?} slice, got {found:?}")]
    WrongSlice { expected: String, found: String },
}

/// An exact share with its own denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ShareRepr", try_from = "ShareRepr")]
pub struct Share {
    pub numerator: u64,
    pub denominator: u64,
    /// Decimals shown when rendered as a percentage.
    pub decimals: u32,
}

#[derive(Serialize, Deserialize)]
struct ShareRepr {
    numerator: u64,
    denominator: u64,
    decimals: u32,
    percent: Option<String>,
}

impl From<Share> for ShareRepr {
    fn from(s: Share) -> Self {
        Self {
            numerator: s.numerator,
            denominator: s.denominator,
            decimals: s.decimals,
            percent: s.percent(),
        }
    }
}

impl TryFrom<ShareRepr> for Share {
    type Error = String;

    fn try_from(r: ShareRepr) -> Result<Self, Self::Error> {
        let s = Share::new(r.numerator, r.denominator, r.decimals);
        if r.percent.is_some() && r.percent != s.percent() {
            return Err(format!(
                "rendered percent {:?} does not match {}/{}",
                r.percent, r.numerator, r.denominator
            ));
        }
        Ok(s)
    }
}

impl Share {
    pub fn new(numerator: u64, denominator: u64, decimals: u32) -> Self {
        Self {
            numerator,
            denominator,
            decimals,
        }
    }

    pub fn exact(&self) -> Option<Ratio<u64>> {
        (self.denominator != 0).then(|| Ratio::new(self.numerator, self.denominator))
    }

    /// Percentage rounded half-up; `None` for an empty denominator.
    pub fn percent(&self) -> Option<String> {
        if self.denominator == 0 {
            return None;
        }
        let scale = 10u128.pow(self.decimals);
        let num = self.numerator as u128 * 100 * scale;
        let den = self.denominator as u128;
        let scaled = (2 * num + den) / (2 * den);
        let whole = scaled / scale;
        if self.decimals == 0 {
            return Some(whole.to_string());
        }
        let frac = scaled % scale;
        Some(format!(
            "{whole}.{frac:0width$}",
            width = self.decimals as usize
        ))
    }
}

impl fmt::Display for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.percent() {
            Some(p) => write!(f, "{}/{} = {}%", self.numerator, self.denominator, p),
            None => write!(f, "{}/{} = n/a", self.numerator, self.denominator),
        }
    }
}

/// verify_completed rows from one evidence slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifySlice {
    label: String,
    rows: Vec<Event>,
}

impl VerifySlice {
    pub fn new(label: &str, rows: Vec<Event>) -> Result<Self, AccountingError> {
        if let Some(bad) = rows
            .iter()
            .find(|e| e.event_type != EventType::VerifyCompleted)
        {
            return Err(AccountingError::NotVerifyRow(bad.seq));
        }
        Ok(Self {
            label: label.to_owned(),
            rows,
        })
    }

    pub fn from_events<'a>(label: &str, events: impl IntoIterator<Item = &'a Event>) -> Self {
        Self {
            label: label.to_owned(),
            rows: events
                .into_iter()
                .filter(|e| e.event_type == EventType::VerifyCompleted)
                .cloned()
                .collect(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn rows(&self) -> &[Event] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends rows from a slice with the same label.
    pub fn concat(mut self, other: VerifySlice) -> Result<Self, AccountingError> {
        if self.label != other.label {
            return Err(AccountingError::SliceMismatch(self.label, other.label));
        }
        self.rows.extend(other.rows);
        Ok(self)
    }
}

fn is_production(e: &Event) -> Result<bool, AccountingError> {
    match e.origin {
        Some(o) => Ok(o == Origin::Production),
        None => Err(AccountingError::MissingOrigin(e.seq)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenominatorMap {
    pub all_rows: u64,
    pub known_outcome_rows: u64,
    pub production_rows: u64,
    pub synthetic_rows: u64,
    pub missing_outcome_rows: u64,
}

/// Synthetic here covers both synthetic and session origin.
pub fn denominator_map(slice: &VerifySlice) -> Result<DenominatorMap, AccountingError> {
    let mut m = DenominatorMap {
        all_rows: 0,
        known_outcome_rows: 0,
        production_rows: 0,
        synthetic_rows: 0,
        missing_outcome_rows: 0,
    };
    for r in slice.rows() {
        m.all_rows += 1;
        if r.outcome.is_some() {
            m.known_outcome_rows += 1;
        } else {
            m.missing_outcome_rows += 1;
        }
        if is_production(r)? {
            m.production_rows += 1;
        } else {
            m.synthetic_rows += 1;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharePolicy {
    KnownOutcome,
    AllRow,
}

impl SharePolicy {
    /// Decimals each policy is reported at.
    pub fn decimals(self) -> u32 {
        match self {
            SharePolicy::KnownOutcome => 1,
            SharePolicy::AllRow => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub slice_label: String,
    pub policy: SharePolicy,
    pub share: Share,
}

/// Success rows over known-outcome rows, or over all rows.
pub fn verify_success_share(
    slice: &VerifySlice,
    policy: SharePolicy,
) -> Result<AccountingReport, AccountingError> {
    if slice.is_empty() {
        return Err(AccountingError::EmptySlice);
    }
    let success = slice
        .rows()
        .iter()
        .filter(|r| r.outcome == Some(Outcome::Success))
        .count() as u64;
    let denominator = match policy {
        SharePolicy::KnownOutcome => {
            slice.rows().iter().filter(|r| r.outcome.is_some()).count() as u64
        }
        SharePolicy::AllRow => slice.len() as u64,
    };
    Ok(AccountingReport {
        slice_label: slice.label().to_owned(),
        policy,
        share: Share::new(success, denominator, policy.decimals()),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeHistogram {
    pub total: u64,
    pub success: u64,
    pub blocked: u64,
    pub failed: u64,
    pub skipped: u64,
    pub missing: u64,
}

impl OutcomeHistogram {
    fn add(&mut self, outcome: Option<Outcome>) {
        self.total += 1;
        match outcome {
            Some(Outcome::Success) => self.success += 1,
            Some(Outcome::Blocked) => self.blocked += 1,
            Some(Outcome::Failed) => self.failed += 1,
            Some(Outcome::Skipped) => self.skipped += 1,
            None => self.missing += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductionSplit {
    pub production: OutcomeHistogram,
    pub synthetic_session: OutcomeHistogram,
}

pub fn production_split(slice: &VerifySlice) -> Result<ProductionSplit, AccountingError> {
    let mut split = ProductionSplit {
        production: OutcomeHistogram::default(),
        synthetic_session: OutcomeHistogram::default(),
    };
    for r in slice.rows() {
        if is_production(r)? {
            split.production.add(r.outcome);
        } else {
            split.synthetic_session.add(r.outcome);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub top_cluster: Option<String>,
    pub top_cluster_rows: u64,
    pub total_rows: u64,
    pub outside_rows: u64,
    pub share: Share,
}

/// Largest reporting cluster by row count; ties go to the smallest id.
/// Rows without a cluster only count as outside.
pub fn concentration(slice: &VerifySlice) -> ConcentrationReport {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in slice.rows() {
        if let Some(c) = &r.cluster_id {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut top: Option<(&str, u64)> = None;
    for (c, n) in &counts {
        if top.is_none_or(|(_, best)| *n > best) {
            top = Some((c, *n));
        }
    }
    let total = slice.len() as u64;
    let top_rows = top.map(|(_, n)| n).unwrap_or(0);
    ConcentrationReport {
        top_cluster: top.map(|(c, _)| c.to_owned()),
        top_cluster_rows: top_rows,
        total_rows: total,
        outside_rows: total - top_rows,
        share: Share::new(top_rows, total, 2),
    }
}

/// Production-subset task accounting. Carries no global coverage figure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub production_task_ids: u64,
    pub with_verify: Share,
    pub completed: u64,
    pub completed_with_verify: Share,
    pub note: String,
}

pub const COVERAGE_NOTE: &str = "global task-level verify coverage is not computable";

pub fn subset_accounting<'a>(events: impl IntoIterator<Item = &'a Event>) -> SubsetReport {
    let mut production: BTreeSet<&str> = BTreeSet::new();
    let mut verified: BTreeSet<&str> = BTreeSet::new();
    let mut completed: BTreeSet<&str> = BTreeSet::new();
    for e in events {
        if e.origin != Some(Origin::Production) {
            continue;
        }
        production.insert(&e.task_id);
        match e.event_type {
            EventType::VerifyCompleted => {
                verified.insert(&e.task_id);
            }
            EventType::TaskCompleted => {
                completed.insert(&e.task_id);
            }
            _ => {}
        }
    }
    let both = completed.intersection(&verified).count() as u64;
    SubsetReport {
        production_task_ids: production.len() as u64,
        with_verify: Share::new(verified.len() as u64, production.len() as u64, 1),
        completed: completed.len() as u64,
        completed_with_verify: Share::new(both, completed.len() as u64, 1),
        note: COVERAGE_NOTE.to_owned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseClass {
    BlockedProduction,
    BlockedSynthetic,
    FailedProduction,
    FailedSyntheticDrill,
    Skipped,
    MissingOutcomeArtifact,
}

impl CaseClass {
    pub fn label(self) -> &'static str {
        match self {
            CaseClass::BlockedProduction => "blocked_production",
            CaseClass::BlockedSynthetic => "blocked_synthetic",
            CaseClass::FailedProduction => "failed_production",
            CaseClass::FailedSyntheticDrill => "failed_synthetic_drill",
            CaseClass::Skipped => "skipped",
            CaseClass::MissingOutcomeArtifact => "missing_outcome_artifact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRow {
    pub task_id: String,
    pub seq: u64,
    pub classification: CaseClass,
    pub blocked_reason: Option<String>,
}

/// Classifies every non-success or outcome-missing row of the
/// historical-active slice.
pub fn case_table(slice: &VerifySlice) -> Result<Vec<CaseRow>, AccountingError> {
    if slice.label() != HISTORICAL_ACTIVE {
        return Err(AccountingError::WrongSlice {
            expected: HISTORICAL_ACTIVE.to_owned(),
            found: slice.label().to_owned(),
        });
    }
    let mut out = Vec::new();
    for r in slice.rows() {
        let class = match r.outcome {
            Some(Outcome::Success) => continue,
            None => CaseClass::MissingOutcomeArtifact,
            Some(Outcome::Skipped) => CaseClass::Skipped,
            Some(Outcome::Blocked) => {
                if is_production(r)? {
                    CaseClass::BlockedProduction
                } else {
                    CaseClass::BlockedSynthetic
                }
            }
            Some(Outcome::Failed) => {
                if is_production(r)? {
                    CaseClass::FailedProduction
                } else {
                    CaseClass::FailedSyntheticDrill
                }
            }
        };
        out.push(CaseRow {
            task_id: r.task_id.clone(),
            seq: r.seq,
            classification: class,
            blocked_reason: r.blocked_reason.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: Tier,
    pub verify_rows: u64,
    pub total_events: u64,
    pub ratio: Share,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownTierRow {
    pub verify_rows: u64,
    pub total_events: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierProxyReport {
    pub tiers: Vec<TierRow>,
    pub unknown: UnknownTierRow,
    pub total_events: u64,
}

/// Event-count proxy per tier. Events with no tier are kept apart.
pub fn tier_overhead_proxy<'a>(events: impl IntoIterator<Item = &'a Event>) -> TierProxyReport {
    let mut per: BTreeMap<Tier, (u64, u64)> = Tier::ALL.iter().map(|t| (*t, (0, 0))).collect();
    let mut unknown = UnknownTierRow {
        verify_rows: 0,
        total_events: 0,
    };
    let mut total = 0;
    for e in events {
        total += 1;
        let is_verify = e.event_type == EventType::VerifyCompleted;
        match e.tier {
            Some(t) => {
                let slot = per.entry(t).or_default();
                slot.1 += 1;
                slot.0 += is_verify as u64;
            }
            None => {
                unknown.total_events += 1;
                unknown.verify_rows += is_verify as u64;
            }
        }
    }
    TierProxyReport {
        tiers: per
            .into_iter()
            .map(|(tier, (v, n))| TierRow {
                tier,
                verify_rows: v,
                total_events: n,
                ratio: Share::new(v, n, 1),
            })
            .collect(),
        unknown,
        total_events: total,
    }
}

//! Workload specifications, read from TOML.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use vgate_core::ledger::Origin;
use vgate_core::packet::Tier;

use crate::SimError;

/// A proportion written as `"a/b"` or `"a"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Proportion(pub Ratio<u64>);

impl Proportion {
    pub fn zero() -> Self {
        Proportion(Ratio::from_integer(0))
    }

    pub fn one() -> Self {
        Proportion(Ratio::from_integer(1))
    }

    /// `self * n`, rounded half-up.
    pub fn of(&self, n: u64) -> u64 {
        let num = *self.0.numer() as u128 * n as u128;
        let den = *self.0.denom() as u128;
        ((2 * num + den) / (2 * den)) as u64
    }
}

impl fmt::Display for Proportion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl FromStr for Proportion {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let r: Ratio<u64> = s
            .trim()
            .parse()
            .map_err(|_| SimError::InvalidProportions(format!("cannot parse {s:?}")))?;
        if r > Ratio::from_integer(1) {
            return Err(SimError::InvalidProportions(format!("{s} exceeds 1")));
        }
        Ok(Proportion(r))
    }
}

impl Serialize for Proportion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Proportion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierMix {
    #[serde(default = "Proportion::zero")]
    pub light: Proportion,
    #[serde(default = "Proportion::zero")]
    pub standard: Proportion,
    #[serde(default = "Proportion::zero")]
    pub deep: Proportion,
}

impl TierMix {
    pub fn parts(&self) -> [(Tier, Proportion); 3] {
        [
            (Tier::Light, self.light),
            (Tier::Standard, self.standard),
            (Tier::Deep, self.deep),
        ]
    }
}

impl Default for TierMix {
    fn default() -> Self {
        Self {
            light: Proportion::zero(),
            standard: Proportion::one(),
            deep: Proportion::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginMix {
    #[serde(default = "Proportion::zero")]
    pub production: Proportion,
    #[serde(default = "Proportion::zero")]
    pub synthetic: Proportion,
    #[serde(default = "Proportion::zero")]
    pub session: Proportion,
}

impl OriginMix {
    pub fn parts(&self) -> [(Origin, Proportion); 3] {
        [
            (Origin::Production, self.production),
            (Origin::Synthetic, self.synthetic),
            (Origin::Session, self.session),
        ]
    }
}

impl Default for OriginMix {
    fn default() -> Self {
        Self {
            production: Proportion::zero(),
            synthetic: Proportion::one(),
            session: Proportion::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterProfile {
    pub clusters: u32,
    /// Share of verify rows that land in the first cluster.
    pub top_cluster_share: Proportion,
}

impl Default for ClusterProfile {
    fn default() -> Self {
        Self {
            clusters: 1,
            top_cluster_share: Proportion::one(),
        }
    }
}

/// Injected precondition failure on a task's first verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Claim surfaces a partial state.
    Phi2,
    /// Verification opened in the wrong mode.
    Phi3,
    /// Evidence below the floor.
    Phi4,
    /// No evidence packet at all.
    Phi4Absent,
    /// Claim accountable differs from the header.
    Phi5,
    /// Ground refreshed after the claim was assembled.
    Phi6,
    /// Claim carries an unresolved question.
    Phi7,
    /// Serious advisory signal left open.
    Phi9,
}

impl Fault {
    pub const ALL: [Fault; 8] = [
        Fault::Phi2,
        Fault::Phi3,
        Fault::Phi4,
        Fault::Phi4Absent,
        Fault::Phi5,
        Fault::Phi6,
        Fault::Phi7,
        Fault::Phi9,
    ];

    pub fn predicate(self) -> u8 {
        match self {
            Fault::Phi2 => 2,
            Fault::Phi3 => 3,
            Fault::Phi4 | Fault::Phi4Absent => 4,
            Fault::Phi5 => 5,
            Fault::Phi6 => 6,
            Fault::Phi7 => 7,
            Fault::Phi9 => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonDetail {
    #[default]
    Full,
    /// Only the generic blocked reason is written.
    Generic,
}

/// A block of identically scripted tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cohort {
    pub name: String,
    pub count: u64,
    pub origin: Origin,
    #[serde(default = "default_tier")]
    pub tier: Tier,
    #[serde(default = "yes")]
    pub reach_verify: bool,
    #[serde(default = "yes")]
    pub under_pack: bool,
    #[serde(default)]
    pub faults: BTreeMap<Fault, u64>,
    /// Faulted tasks left blocked, counted from the cohort's faulted tasks.
    #[serde(default)]
    pub unresolved: u64,
    /// Faulted tasks whose first repair still falls short.
    #[serde(default)]
    pub repeat: u64,
    /// Unfaulted tasks whose first verification is report-only.
    #[serde(default)]
    pub skipped_first: u64,
    /// Admitted tasks that go on to log completion.
    #[serde(default)]
    pub complete: Option<u64>,
    #[serde(default = "default_class")]
    pub task_class: String,
    #[serde(default)]
    pub diagnostic: bool,
    #[serde(default)]
    pub reason_detail: ReasonDetail,
    /// Tasks whose shadow samples belong to the comparable subset.
    #[serde(default)]
    pub comparable: Option<u64>,
}

fn default_tier() -> Tier {
    Tier::Standard
}

fn yes() -> bool {
    true
}

fn default_class() -> String {
    "change".to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Padding {
    pub tier: Tier,
    pub total_events: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seed: u64,
    #[serde(default)]
    pub slice: Option<String>,
    /// Regular tasks. Drills and artifacts come on top.
    pub task_count: u64,
    #[serde(default)]
    pub tier_mix: TierMix,
    #[serde(default)]
    pub origin_mix: OriginMix,
    #[serde(default)]
    pub cluster_profile: ClusterProfile,
    /// Per-fault share of verify-reaching tasks.
    #[serde(default)]
    pub fault_rates: BTreeMap<Fault, Proportion>,
    #[serde(default)]
    pub missing_outcome_artifacts: u64,
    #[serde(default)]
    pub rollback_drills: u64,
    #[serde(default)]
    pub failing_rollback_drills: u64,
    #[serde(default)]
    pub denied_rollback_drills: u64,
    #[serde(default = "Proportion::one")]
    pub verify_reach: Proportion,
    #[serde(default = "Proportion::zero")]
    pub unresolved_rate: Proportion,
    #[serde(default = "Proportion::zero")]
    pub repeat_rate: Proportion,
    #[serde(default = "Proportion::zero")]
    pub skip_rate: Proportion,
    #[serde(default = "default_session_size")]
    pub session_size: u64,
    #[serde(default)]
    pub rotate_every: Option<u64>,
    #[serde(default)]
    pub padding: Option<Padding>,
    /// Explicit task blocks; when present they replace the rate fields.
    #[serde(default, rename = "cohort")]
    pub cohorts: Vec<Cohort>,
}

fn default_session_size() -> u64 {
    32
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let spec: WorkloadSpec =
            toml::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// A rate-driven spec with every other field at its default.
    pub fn basic(seed: u64, task_count: u64) -> Self {
        Self {
            seed,
            slice: None,
            task_count,
            tier_mix: TierMix::default(),
            origin_mix: OriginMix::default(),
            cluster_profile: ClusterProfile::default(),
            fault_rates: BTreeMap::new(),
            missing_outcome_artifacts: 0,
            rollback_drills: 0,
            failing_rollback_drills: 0,
            denied_rollback_drills: 0,
            verify_reach: Proportion::one(),
            unresolved_rate: Proportion::zero(),
            repeat_rate: Proportion::zero(),
            skip_rate: Proportion::zero(),
            session_size: default_session_size(),
            rotate_every: None,
            padding: None,
            cohorts: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sum =
            |parts: &[Proportion]| parts.iter().fold(Ratio::from_integer(0u64), |a, p| a + p.0);
        let tiers: Vec<Proportion> = self.tier_mix.parts().iter().map(|p| p.1).collect();
        if sum(&tiers) != Ratio::from_integer(1) {
            return Err(SimError::InvalidProportions(
                "tier_mix does not sum to 1".into(),
            ));
        }
        let origins: Vec<Proportion> = self.origin_mix.parts().iter().map(|p| p.1).collect();
        if sum(&origins) != Ratio::from_integer(1) {
            return Err(SimError::InvalidProportions(
                "origin_mix does not sum to 1".into(),
            ));
        }
        let rates: Vec<Proportion> = self.fault_rates.values().copied().collect();
        if sum(&rates) > Ratio::from_integer(1) {
            return Err(SimError::InvalidProportions("fault_rates exceed 1".into()));
        }
        if self.cluster_profile.clusters == 0 {
            return Err(SimError::InvalidSpec(
                "cluster_profile.clusters must be at least 1".into(),
            ));
        }
        if self.session_size == 0 {
            return Err(SimError::InvalidSpec(
                "session_size must be at least 1".into(),
            ));
        }
        if self.rotate_every == Some(0) {
            return Err(SimError::InvalidSpec(
                "rotate_every must be at least 1".into(),
            ));
        }
        if self.failing_rollback_drills + self.denied_rollback_drills > self.rollback_drills {
            return Err(SimError::InvalidSpec(
                "more failing or denied drills than drills".into(),
            ));
        }
        if !self.cohorts.is_empty() {
            self.validate_cohorts()?;
        } else if self.verify_reach != Proportion::one() && self.tier_mix.deep != Proportion::zero()
        {
            return Err(SimError::InvalidSpec(
                "deep tasks must all reach verify".into(),
            ));
        }
        Ok(())
    }

    fn validate_cohorts(&self) -> Result<(), SimError> {
        if !self.fault_rates.is_empty() {
            return Err(SimError::InvalidSpec(
                "fault_rates and cohorts are exclusive".into(),
            ));
        }
        let total: u64 = self.cohorts.iter().map(|c| c.count).sum();
        if total != self.task_count {
            return Err(SimError::InvalidSpec(format!(
                "cohorts hold {total} tasks, task_count is {}",
                self.task_count
            )));
        }
        for (origin, p) in self.origin_mix.parts() {
            let n: u64 = self
                .cohorts
                .iter()
                .filter(|c| c.origin == origin)
                .map(|c| c.count)
                .sum();
            if Ratio::new(n, self.task_count.max(1)) != p.0 && self.task_count > 0 {
                return Err(SimError::InvalidProportions(format!(
                    "{} cohorts hold {n} tasks, origin_mix says {p}",
                    origin.label()
                )));
            }
        }
        for (tier, p) in self.tier_mix.parts() {
            let n: u64 = self
                .cohorts
                .iter()
                .filter(|c| c.tier == tier)
                .map(|c| c.count)
                .sum();
            if Ratio::new(n, self.task_count.max(1)) != p.0 && self.task_count > 0 {
                return Err(SimError::InvalidProportions(format!(
                    "{} cohorts hold {n} tasks, tier_mix says {p}",
                    tier.label()
                )));
            }
        }
        for c in &self.cohorts {
            let bad = |m: &str| Err(SimError::InvalidCohort(c.name.clone(), m.to_owned()));
            let faulted: u64 = c.faults.values().sum();
            if faulted > c.count {
                return bad("more faults than tasks");
            }
            if !c.reach_verify && (faulted > 0 || c.under_pack) {
                return bad("tasks that never verify cannot carry faults or run under the pack");
            }
            if c.unresolved + c.repeat > faulted {
                return bad("unresolved plus repeat exceeds faulted tasks");
            }
            if c.skipped_first + faulted > c.count {
                return bad("skipped plus faulted exceeds count");
            }
            let admitted = c.count - c.unresolved;
            let complete = c
                .complete
                .unwrap_or(if c.reach_verify { admitted } else { 0 });
            if complete > admitted || !c.reach_verify && complete > 0 {
                return bad("complete exceeds admitted tasks");
            }
            if c.under_pack && complete != admitted {
                return bad("pack tasks must log a terminal event");
            }
            if c.under_pack && c.faults.contains_key(&Fault::Phi4Absent) {
                return bad("the pack template needs an evidence packet per claim");
            }
            if c.tier == Tier::Deep && !c.under_pack {
                return bad("deep tasks need the pack's declared rollback");
            }
            if c.comparable.unwrap_or(0) > c.count {
                return bad("comparable exceeds count");
            }
        }
        Ok(())
    }
}

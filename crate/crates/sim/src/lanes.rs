//! Role registry with per-role authority flags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vgate_core::gate::VERIFIER_ROLE;
use vgate_core::ledger::{Event, EventType};
use vgate_core::lifecycle::{BOARD_ROLE, COORDINATOR_ROLE, DIAGNOSTIC_ROLE};

use crate::SimError;

pub const WORKER_ROLE: &str = "worker";
pub const LEAD_ROLE: &str = "lead";
pub const REVIEWER_ROLE: &str = "ops_reviewer";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Authority {
    pub can_claim: bool,
    pub can_verify: bool,
    pub can_escalate: bool,
    pub holds_veto: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneRegistry {
    roles: BTreeMap<String, Authority>,
}

impl LaneRegistry {
    pub fn new(roles: BTreeMap<String, Authority>) -> Result<Self, SimError> {
        let verifiers: Vec<&String> = roles
            .iter()
            .filter(|(_, a)| a.can_verify)
            .map(|(r, _)| r)
            .collect();
        if verifiers.len() != 1 {
            return Err(SimError::InvalidSpec(format!(
                "{} roles can verify, need exactly one",
                verifiers.len()
            )));
        }
        if roles.values().any(|a| a.can_verify && a.can_claim) {
            return Err(SimError::InvalidSpec(
                "the verifier role cannot claim".into(),
            ));
        }
        Ok(Self { roles })
    }

    pub fn authority(&self, role: &str) -> Option<Authority> {
        self.roles.get(role).copied()
    }

    pub fn roles(&self) -> impl Iterator<Item = (&String, &Authority)> {
        self.roles.iter()
    }

    /// Events whose actor does not hold the authority the event needs.
    pub fn violations<'a>(&self, events: impl IntoIterator<Item = &'a Event>) -> Vec<u64> {
        let mut out = Vec::new();
        for e in events {
            let Some(actor) = e.actor.as_deref() else {
                continue;
            };
            let a = self.authority(actor).unwrap_or_default();
            let ok = match e.event_type {
                EventType::VerifyStarted | EventType::VerifyCompleted => {
                    a.can_verify && !a.can_claim
                }
                EventType::ClaimPacketCreated | EventType::ClaimPacketRefreshed => a.can_claim,
                EventType::EscalationBoard | EventType::DiagnosticReview => a.can_escalate,
                _ => true,
            };
            if !ok {
                out.push(e.seq);
            }
        }
        out
    }
}

impl Default for LaneRegistry {
    fn default() -> Self {
        let flags = |can_claim, can_verify, can_escalate, holds_veto| Authority {
            can_claim,
            can_verify,
            can_escalate,
            holds_veto,
        };
        let roles = [
            (WORKER_ROLE, flags(true, false, false, false)),
            (LEAD_ROLE, flags(true, false, true, false)),
            (VERIFIER_ROLE, flags(false, true, false, false)),
            (COORDINATOR_ROLE, flags(false, false, true, false)),
            (DIAGNOSTIC_ROLE, flags(false, false, true, false)),
            (BOARD_ROLE, flags(false, false, true, true)),
            (REVIEWER_ROLE, flags(false, false, false, true)),
        ];
        Self::new(roles.into_iter().map(|(r, a)| (r.to_owned(), a)).collect())
            .expect("default lanes are valid")
    }
}

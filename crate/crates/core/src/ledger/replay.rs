//! Ex-post replay accounting for one session.
//!
//! Expected events are the pack template once per task, plus one branch
//! sequence for every recovery, repeated verify and rollback the ledger
//! shows. Only reporting-path events of tasks run under the pack count as
//! observed; operator review, escalation and padding rows do not.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Event, EventType, LedgerError, Outcome};
use crate::packet::ProcedurePack;

pub const RECOVERY_SEQUENCE: [EventType; 6] = [
    EventType::RecoveryPacketCreated,
    EventType::ClaimPacketRefreshed,
    EventType::EvidencePacketCreated,
    EventType::RecoveryClosed,
    EventType::VerifyStarted,
    EventType::VerifyCompleted,
];

pub const REVERIFY_SEQUENCE: [EventType; 2] =
    [EventType::VerifyStarted, EventType::VerifyCompleted];

/// The second slot is filled by whichever rollback outcome occurred.
pub const ROLLBACK_SEQUENCE: [EventType; 2] =
    [EventType::RollbackEnqueued, EventType::RollbackExecuted];

/// Events that can fill the template's final outcome-reporting slot.
const TERMINAL: [EventType; 3] = [
    EventType::TaskCompleted,
    EventType::TaskBlocked,
    EventType::TaskFailed,
];

const ROLLBACK_OUTCOMES: [EventType; 3] = [
    EventType::RollbackExecuted,
    EventType::RollbackFailed,
    EventType::RollbackDenied,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Canonical,
    Recovery,
    Reverify,
    Rollback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCount {
    pub kind: BranchKind,
    pub repetitions: u64,
    pub events_per_repetition: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayOptions {
    /// Also report the ex-ante minimal count (template once per task).
    pub ex_ante_minimal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub observed_session_events: u64,
    pub expected_events: u64,
    pub branch_profile: Vec<BranchCount>,
    pub identity_holds: bool,
    pub ex_ante_minimal_events: Option<u64>,
}

pub fn reporting_vocabulary(pack: &ProcedurePack) -> BTreeSet<EventType> {
    let mut v: BTreeSet<EventType> = pack.expected_event_template.iter().copied().collect();
    v.extend(RECOVERY_SEQUENCE);
    v.extend(REVERIFY_SEQUENCE);
    v.extend(ROLLBACK_SEQUENCE);
    v.extend(TERMINAL);
    v.extend(ROLLBACK_OUTCOMES);
    v
}

/// `events` is the seq-ordered session reconstruction. The identity is
/// reported, never enforced.
pub fn replay_accounting(
    events: &[Event],
    session_id: &str,
    pack: &ProcedurePack,
    opts: ReplayOptions,
) -> Result<ReplayReport, LedgerError> {
    let vocab = reporting_vocabulary(pack);
    let mut observed = 0u64;
    let (mut tasks, mut recoveries, mut reverifies, mut rollbacks) = (0u64, 0u64, 0u64, 0u64);
    for ev in events.iter().filter(|e| e.session_id == session_id) {
        let Some(declared) = &ev.protocol_expected else {
            continue;
        };
        if declared != &pack.task_archetype {
            return Err(LedgerError::UnknownPack {
                session: session_id.to_owned(),
                expected: pack.task_archetype.clone(),
                found: declared.clone(),
            });
        }
        if !vocab.contains(&ev.event_type) {
            continue;
        }
        observed += 1;
        match ev.event_type {
            EventType::TaskCreated => tasks += 1,
            EventType::RecoveryPacketCreated => recoveries += 1,
            EventType::VerifyCompleted if ev.outcome == Some(Outcome::Skipped) => reverifies += 1,
            EventType::RollbackEnqueued => rollbacks += 1,
            _ => {}
        }
    }
    let template_len = pack.expected_event_template.len() as u64;
    let profile = vec![
        BranchCount {
            kind: BranchKind::Canonical,
            repetitions: tasks,
            events_per_repetition: template_len,
        },
        BranchCount {
            kind: BranchKind::Recovery,
            repetitions: recoveries,
            events_per_repetition: RECOVERY_SEQUENCE.len() as u64,
        },
        BranchCount {
            kind: BranchKind::Reverify,
            repetitions: reverifies,
            events_per_repetition: REVERIFY_SEQUENCE.len() as u64,
        },
        BranchCount {
            kind: BranchKind::Rollback,
            repetitions: rollbacks,
            events_per_repetition: ROLLBACK_SEQUENCE.len() as u64,
        },
    ];
    let expected: u64 = profile
        .iter()
        .map(|b| b.repetitions * b.events_per_repetition)
        .sum();
    Ok(ReplayReport {
        session_id: session_id.to_owned(),
        observed_session_events: observed,
        expected_events: expected,
        branch_profile: profile,
        identity_holds: observed == expected,
        ex_ante_minimal_events: opts.ex_ante_minimal.then_some(tasks * template_len),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pack() -> ProcedurePack {
        ProcedurePack::canonical("P")
    }

    fn row(t: EventType) -> Event {
        let mut e = Event::new("T", "S", t);
        e.protocol_expected = Some("governed-change".into());
        e
    }

    fn vc(outcome: Outcome) -> Event {
        let mut e = row(EventType::VerifyCompleted);
        e.outcome = Some(outcome);
        e
    }

    fn canonical() -> Vec<Event> {
        vec![
            row(EventType::TaskCreated),
            row(EventType::ClaimPacketCreated),
            row(EventType::EvidencePacketCreated),
            row(EventType::VerifyStarted),
            vc(Outcome::Success),
            row(EventType::TaskCompleted),
        ]
    }

    #[test]
    fn canonical_path_matches_template_length() {
        let r = replay_accounting(&canonical(), "S", &pack(), ReplayOptions::default()).unwrap();
        assert_eq!(r.observed_session_events, 6);
        assert_eq!(r.expected_events, 6);
        assert!(r.identity_holds);
        assert_eq!(r.ex_ante_minimal_events, None);
    }

    #[test]
    fn recovery_adds_one_branch_sequence() {
        let mut evs = canonical();
        evs.truncate(4);
        evs.push(vc(Outcome::Blocked));
        evs.extend([
            row(EventType::RecoveryPacketCreated),
            row(EventType::ClaimPacketRefreshed),
            row(EventType::EvidencePacketCreated),
            row(EventType::RecoveryClosed),
            row(EventType::VerifyStarted),
            vc(Outcome::Success),
            row(EventType::TaskCompleted),
        ]);
        let r = replay_accounting(
            &evs,
            "S",
            &pack(),
            ReplayOptions {
                ex_ante_minimal: true,
            },
        )
        .unwrap();
        assert_eq!(r.expected_events, 12);
        assert!(r.identity_holds);
        assert_eq!(r.ex_ante_minimal_events, Some(6));
    }

    #[test]
    fn operator_rows_are_excluded() {
        let mut evs = canonical();
        evs.insert(1, row(EventType::DiagnosticReview));
        evs.insert(2, row(EventType::StageTransition));
        evs.push(row(EventType::RollbackReviewed));
        let r = replay_accounting(&evs, "S", &pack(), ReplayOptions::default()).unwrap();
        assert!(r.identity_holds);
    }

    #[test]
    fn deleting_verify_completed_breaks_identity() {
        let mut evs = canonical();
        evs.remove(4);
        let r = replay_accounting(&evs, "S", &pack(), ReplayOptions::default()).unwrap();
        assert!(!r.identity_holds);
    }

    #[test]
    fn other_pack_is_unknown() {
        let mut evs = canonical();
        evs[2].protocol_expected = Some("other".into());
        assert!(matches!(
            replay_accounting(&evs, "S", &pack(), ReplayOptions::default()),
            Err(LedgerError::UnknownPack { .. })
        ));
    }
}

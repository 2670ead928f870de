//! Append-only governance trace.
//!
//! A ledger is a list of segments, the last of which is active. Rotation
//! archives the active segment and opens a new one; archived segments and
//! their files are never touched again. Sequence numbers are global to the
//! ledger, so reconstruction is a merge by `seq` regardless of where the
//! rotation points fell.

mod event;
mod replay;

pub use event::{AcceptanceStatus, Event, EventType, Origin, Outcome, MISSING_OUTCOME_ARTIFACT};
pub use replay::{
    replay_accounting, reporting_vocabulary, BranchCount, BranchKind, ReplayOptions, ReplayReport,
    RECOVERY_SEQUENCE, REVERIFY_SEQUENCE, ROLLBACK_SEQUENCE,
};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTIVE_FILE: &str = "events.active.jsonl";

pub fn archived_file_name(segment_id: u32) -> String {
    format!("events.{segment_id}.archived")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("ledger is sealed; no active segment")]
    SealedLedger,
    #[error("active segment is empty")]
    EmptyActive,
    #[error("parent event {parent} is not an earlier event (appending seq {seq})")]
    DanglingParent { parent: u64, seq: u64 },
    #[error("outcome set on a {0} event")]
    OutcomeOnNonVerify(EventType),
    #[error("verify_completed without an outcome")]
    MissingOutcome,
    #[error("sequence {seq} does not increase past {last}")]
    NonMonotonic { seq: u64, last: u64 },
    #[error("session {session} declares pack {found:?}, replay was asked for {expected:?}")]
    UnknownPack {
        session: String,
        expected: String,
        found: String,
    },
    #[error("ledger io: {0}")]
    Io(String),
}

fn io_err(e: impl std::fmt::Display) -> LedgerError {
    LedgerError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    Active,
    Archived,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerSegment {
    pub segment_id: u32,
    pub status: SegmentStatus,
    pub events: Vec<Event>,
}

#[derive(Debug)]
struct Sink {
    dir: PathBuf,
    active: BufWriter<File>,
}

#[derive(Debug)]
pub struct Ledger {
    run_id: String,
    segments: Vec<LedgerSegment>,
    last_seq: u64,
    sealed: bool,
    position: BTreeMap<u64, (usize, usize)>,
    by_task: BTreeMap<String, Vec<u64>>,
    sink: Option<Sink>,
}

impl Ledger {
    pub fn new(run_id: &str) -> Self {
        Self {
            run_id: run_id.to_owned(),
            segments: vec![LedgerSegment {
                segment_id: 1,
                status: SegmentStatus::Active,
                events: Vec::new(),
            }],
            last_seq: 0,
            sealed: false,
            position: BTreeMap::new(),
            by_task: BTreeMap::new(),
            sink: None,
        }
    }

    /// A ledger that also writes every append to `dir`.
    pub fn create_dir(run_id: &str, dir: &Path) -> Result<Self, LedgerError> {
        fs::create_dir_all(dir).map_err(io_err)?;
        let path = dir.join(ACTIVE_FILE);
        let file = File::create(&path).map_err(io_err)?;
        let mut ledger = Self::new(run_id);
        ledger.sink = Some(Sink {
            dir: dir.to_owned(),
            active: BufWriter::new(file),
        });
        Ok(ledger)
    }

    /// Loads archived segments in id order, then the active file, and
    /// reattaches the active file for further appends.
    pub fn open_dir(dir: &Path) -> Result<Self, LedgerError> {
        let mut archived: Vec<(u32, PathBuf)> = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err)? {
            let entry = entry.map_err(io_err)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(n) = name
                .strip_prefix("events.")
                .and_then(|s| s.strip_suffix(".archived"))
                .and_then(|s| s.parse::<u32>().ok())
            {
                archived.push((n, entry.path()));
            }
        }
        archived.sort();
        let mut segments = Vec::new();
        for (n, path) in &archived {
            segments.push(LedgerSegment {
                segment_id: *n,
                status: SegmentStatus::Archived,
                events: read_events(path)?,
            });
        }
        let active_path = dir.join(ACTIVE_FILE);
        let active_events = if active_path.exists() {
            read_events(&active_path)?
        } else {
            Vec::new()
        };
        let next_id = archived.last().map(|(n, _)| n + 1).unwrap_or(1);
        segments.push(LedgerSegment {
            segment_id: next_id,
            status: SegmentStatus::Active,
            events: active_events,
        });
        let mut ledger = Self::from_segments(segments)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&active_path)
            .map_err(io_err)?;
        ledger.sink = Some(Sink {
            dir: dir.to_owned(),
            active: BufWriter::new(file),
        });
        Ok(ledger)
    }

    /// Builds an in-memory ledger from already-sequenced events. Only
    /// monotonicity is checked; loaded data may be a deliberately damaged
    /// copy.
    pub fn from_events(events: Vec<Event>) -> Result<Self, LedgerError> {
        Self::from_segments(vec![LedgerSegment {
            segment_id: 1,
            status: SegmentStatus::Active,
            events,
        }])
    }

    fn from_segments(segments: Vec<LedgerSegment>) -> Result<Self, LedgerError> {
        let run_id = segments
            .iter()
            .flat_map(|s| s.events.first())
            .map(|e| e.run_id.clone())
            .next()
            .unwrap_or_default();
        let mut ledger = Self::new(&run_id);
        ledger.segments = segments;
        for (si, seg) in ledger.segments.iter().enumerate() {
            for (ei, ev) in seg.events.iter().enumerate() {
                if ev.seq <= ledger.last_seq {
                    return Err(LedgerError::NonMonotonic {
                        seq: ev.seq,
                        last: ledger.last_seq,
                    });
                }
                ledger.last_seq = ev.seq;
                ledger.position.insert(ev.seq, (si, ei));
                ledger
                    .by_task
                    .entry(ev.task_id.clone())
                    .or_default()
                    .push(ev.seq);
            }
        }
        Ok(ledger)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn segments(&self) -> &[LedgerSegment] {
        &self.segments
    }

    pub fn dir(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.dir.as_path())
    }

    /// Appends `event`, assigning the next sequence number and the run id.
    pub fn append(&mut self, mut event: Event) -> Result<u64, LedgerError> {
        if self.sealed {
            return Err(LedgerError::SealedLedger);
        }
        let seq = self.last_seq + 1;
        if let Some(parent) = event.parent_event_id {
            if parent >= seq || !self.position.contains_key(&parent) {
                return Err(LedgerError::DanglingParent { parent, seq });
            }
        }
        match (event.event_type, event.outcome) {
            (EventType::VerifyCompleted, None) if !event.is_missing_outcome_artifact() => {
                return Err(LedgerError::MissingOutcome)
            }
            (t, Some(_)) if t != EventType::VerifyCompleted => {
                return Err(LedgerError::OutcomeOnNonVerify(t))
            }
            _ => {}
        }
        event.seq = seq;
        event.run_id = self.run_id.clone();
        if let Some(sink) = &mut self.sink {
            serde_json::to_writer(&mut sink.active, &event).map_err(io_err)?;
            sink.active.write_all(b"\n").map_err(io_err)?;
        }
        let si = self.segments.len() - 1;
        let seg = &mut self.segments[si];
        self.position.insert(seq, (si, seg.events.len()));
        self.by_task
            .entry(event.task_id.clone())
            .or_default()
            .push(seq);
        seg.events.push(event);
        self.last_seq = seq;
        Ok(seq)
    }

    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if let Some(sink) = &mut self.sink {
            sink.active.flush().map_err(io_err)?;
        }
        Ok(())
    }

    /// Archives the active segment and opens an empty one.
    pub fn rotate(&mut self) -> Result<&LedgerSegment, LedgerError> {
        if self.sealed {
            return Err(LedgerError::SealedLedger);
        }
        let si = self.segments.len() - 1;
        if self.segments[si].events.is_empty() {
            return Err(LedgerError::EmptyActive);
        }
        let id = self.segments[si].segment_id;
        self.archive_active_file(id, true)?;
        self.segments[si].status = SegmentStatus::Archived;
        self.segments.push(LedgerSegment {
            segment_id: id + 1,
            status: SegmentStatus::Active,
            events: Vec::new(),
        });
        Ok(&self.segments[si])
    }

    /// Archives whatever is active and refuses further appends.
    pub fn seal(&mut self) -> Result<(), LedgerError> {
        if self.sealed {
            return Ok(());
        }
        let si = self.segments.len() - 1;
        let id = self.segments[si].segment_id;
        if self.segments[si].events.is_empty() {
            self.segments.pop();
            if let Some(sink) = &self.sink {
                let _ = fs::remove_file(sink.dir.join(ACTIVE_FILE));
            }
        } else {
            self.archive_active_file(id, false)?;
            self.segments[si].status = SegmentStatus::Archived;
        }
        self.sink = None;
        self.sealed = true;
        Ok(())
    }

    fn archive_active_file(&mut self, id: u32, reopen: bool) -> Result<(), LedgerError> {
        let Some(sink) = &mut self.sink else {
            return Ok(());
        };
        sink.active.flush().map_err(io_err)?;
        let active = sink.dir.join(ACTIVE_FILE);
        fs::rename(&active, sink.dir.join(archived_file_name(id))).map_err(io_err)?;
        if reopen {
            sink.active = BufWriter::new(File::create(&active).map_err(io_err)?);
        }
        Ok(())
    }

    pub fn get(&self, seq: u64) -> Option<&Event> {
        let (si, ei) = *self.position.get(&seq)?;
        self.segments.get(si)?.events.get(ei)
    }

    /// All events across segments, ordered by `seq`.
    pub fn events(&self) -> impl DoubleEndedIterator<Item = &Event> {
        self.segments.iter().flat_map(|s| s.events.iter())
    }

    /// The seq-ordered projection of one session across every segment.
    pub fn reconstruct(&self, session_id: &str) -> Vec<Event> {
        self.events()
            .filter(|e| e.session_id == session_id)
            .cloned()
            .collect()
    }

    pub fn sessions(&self) -> Vec<String> {
        let mut out: Vec<String> = self.events().map(|e| e.session_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn task_events(&self, task_id: &str) -> Vec<&Event> {
        self.by_task
            .get(task_id)
            .map(|seqs| seqs.iter().filter_map(|s| self.get(*s)).collect())
            .unwrap_or_default()
    }

    /// Latest event recorded for the task.
    pub fn task_head(&self, task_id: &str) -> Option<u64> {
        self.by_task.get(task_id).and_then(|s| s.last().copied())
    }

    /// Follows `parent_event_id` links from `seq` back to the root.
    pub fn causal_chain(&self, seq: u64) -> Vec<&Event> {
        let mut out = Vec::new();
        let mut cur = self.get(seq);
        while let Some(ev) = cur {
            out.push(ev);
            cur = ev.parent_event_id.and_then(|p| self.get(p));
        }
        out
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events().cloned().collect()
    }
}

impl Drop for Ledger {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, LedgerError> {
    let file = File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Event = serde_json::from_str(&line)
            .map_err(|e| LedgerError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<(), LedgerError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest as _, Sha256};

    fn ev(task: &str, session: &str) -> Event {
        Event::new(task, session, EventType::StageTransition)
    }

    #[test]
    fn first_append_is_seq_one() {
        let mut l = Ledger::new("R");
        assert_eq!(l.append(ev("T", "S")).unwrap(), 1);
        assert_eq!(l.get(1).unwrap().run_id, "R");
    }

    #[test]
    fn ten_thousand_appends_are_strictly_increasing() {
        let mut l = Ledger::new("R");
        let seqs: Vec<u64> = (0..10_000)
            .map(|_| l.append(ev("T", "S")).unwrap())
            .collect();
        assert_eq!(seqs.first(), Some(&1));
        assert_eq!(seqs.last(), Some(&10_000));
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn parent_must_be_earlier() {
        let mut l = Ledger::new("R");
        l.append(ev("T", "S")).unwrap();
        assert_eq!(
            l.append(ev("T", "S").with_parent(Some(5))),
            Err(LedgerError::DanglingParent { parent: 5, seq: 2 })
        );
        assert_eq!(l.append(ev("T", "S").with_parent(Some(1))).unwrap(), 2);
    }

    #[test]
    fn outcome_only_on_verify_completed() {
        let mut l = Ledger::new("R");
        let mut bad = ev("T", "S");
        bad.outcome = Some(Outcome::Success);
        assert!(matches!(
            l.append(bad),
            Err(LedgerError::OutcomeOnNonVerify(_))
        ));
        let vc = Event::new("T", "S", EventType::VerifyCompleted);
        assert_eq!(l.append(vc.clone()), Err(LedgerError::MissingOutcome));
        let mut artifact = vc;
        artifact.detail = Some(MISSING_OUTCOME_ARTIFACT.into());
        assert!(l.append(artifact).is_ok());
    }

    #[test]
    fn rotate_archives_and_opens_empty_active() {
        let mut l = Ledger::new("R");
        assert_eq!(l.rotate().unwrap_err(), LedgerError::EmptyActive);
        for _ in 0..5 {
            l.append(ev("T", "S")).unwrap();
        }
        let archived = l.rotate().unwrap();
        assert_eq!(archived.events.len(), 5);
        assert_eq!(archived.status, SegmentStatus::Archived);
        assert_eq!(l.segments().last().unwrap().events.len(), 0);
    }

    #[test]
    fn two_rotations_preserve_union() {
        let mut l = Ledger::new("R");
        l.append(ev("T", "S")).unwrap();
        l.rotate().unwrap();
        l.append(ev("T", "S")).unwrap();
        l.append(ev("T", "S")).unwrap();
        l.rotate().unwrap();
        l.append(ev("T", "S")).unwrap();
        let statuses: Vec<_> = l.segments().iter().map(|s| s.status).collect();
        assert_eq!(
            statuses,
            vec![
                SegmentStatus::Archived,
                SegmentStatus::Archived,
                SegmentStatus::Active
            ]
        );
        let seqs: Vec<u64> = l.events().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4]);
    }

    #[test]
    fn sealed_ledger_refuses_appends() {
        let mut l = Ledger::new("R");
        l.append(ev("T", "S")).unwrap();
        l.seal().unwrap();
        assert_eq!(l.append(ev("T", "S")), Err(LedgerError::SealedLedger));
    }

    fn file_digest(path: &Path) -> Vec<u8> {
        Sha256::digest(fs::read(path).unwrap()).to_vec()
    }

    #[test]
    fn archived_files_do_not_change() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Ledger::create_dir("R", dir.path()).unwrap();
        for _ in 0..20 {
            l.append(ev("T", "S")).unwrap();
        }
        l.rotate().unwrap();
        let archived = dir.path().join(archived_file_name(1));
        let before = file_digest(&archived);
        for _ in 0..50 {
            l.append(ev("T", "S2")).unwrap();
        }
        l.rotate().unwrap();
        l.append(ev("T", "S")).unwrap();
        l.flush().unwrap();
        assert_eq!(file_digest(&archived), before);

        let reopened = Ledger::open_dir(dir.path()).unwrap();
        assert_eq!(reopened.snapshot(), l.snapshot());
    }

    #[test]
    fn reopened_ledger_continues_sequence() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut l = Ledger::create_dir("R", dir.path()).unwrap();
            l.append(ev("T", "S")).unwrap();
            l.rotate().unwrap();
            l.append(ev("T", "S")).unwrap();
        }
        let mut l = Ledger::open_dir(dir.path()).unwrap();
        assert_eq!(l.append(ev("T", "S")).unwrap(), 3);
        drop(l);
        let l = Ledger::open_dir(dir.path()).unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l.run_id(), "R");
    }

    #[test]
    fn two_interleaved_sessions() {
        let mut l = Ledger::new("R");
        for i in 0..10 {
            l.append(ev("T", if i % 2 == 0 { "A" } else { "B" }))
                .unwrap();
        }
        let a: Vec<u64> = l.reconstruct("A").iter().map(|e| e.seq).collect();
        let b: Vec<u64> = l.reconstruct("B").iter().map(|e| e.seq).collect();
        assert_eq!(a, vec![1, 3, 5, 7, 9]);
        assert_eq!(b, vec![2, 4, 6, 8, 10]);
        assert!(l.reconstruct("C").is_empty());
    }

    #[test]
    fn causal_chain_reaches_root() {
        let mut l = Ledger::new("R");
        let root = l
            .append(Event::new("T", "S", EventType::TaskCreated))
            .unwrap();
        let mut head = root;
        for _ in 0..4 {
            head = l.append(ev("T", "S").with_parent(Some(head))).unwrap();
        }
        let chain = l.causal_chain(head);
        assert_eq!(chain.len(), 5);
        assert_eq!(chain.last().unwrap().event_type, EventType::TaskCreated);
    }

    proptest! {
        #[test]
        fn reconstruction_ignores_rotation_schedule(
            sessions in proptest::collection::vec(0u8..3, 1..200),
            rotate_at in proptest::collection::btree_set(0usize..200, 0..10),
        ) {
            let mut plain = Ledger::new("R");
            let mut rotated = Ledger::new("R");
            for (i, s) in sessions.iter().enumerate() {
                let name = format!("S{s}");
                plain.append(ev("T", &name)).unwrap();
                rotated.append(ev("T", &name)).unwrap();
                if rotate_at.contains(&i) {
                    rotated.rotate().unwrap();
                }
            }
            for s in 0..3u8 {
                let name = format!("S{s}");
                prop_assert_eq!(plain.reconstruct(&name), rotated.reconstruct(&name));
            }
        }

        #[test]
        fn archived_segments_never_change(ops in proptest::collection::vec(any::<bool>(), 1..120)) {
            let mut l = Ledger::new("R");
            let mut frozen: Vec<LedgerSegment> = Vec::new();
            for rotate in ops {
                if rotate {
                    if l.rotate().is_ok() {
                        frozen = l.segments().iter().filter(|s| s.status == SegmentStatus::Archived).cloned().collect();
                    }
                } else {
                    l.append(ev("T", "S")).unwrap();
                }
                let now: Vec<LedgerSegment> = l.segments().iter().filter(|s| s.status == SegmentStatus::Archived).cloned().collect();
                prop_assert_eq!(&now[..frozen.len()], &frozen[..]);
            }
        }
    }
}

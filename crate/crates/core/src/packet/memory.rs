use serde::{Deserialize, Serialize};

use super::PacketId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryClass {
    Canonical,
    ArchiveOnly,
    PromptInjectable,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    CommonGroundSnapshot,
    Packet,
    AfterActionReview,
    TrustState,
    GovernanceLabel,
    RawLog,
    ChatResidue,
    FailedExploration,
    SyntheticExploration,
    UnreviewedNote,
    GovernanceHint,
    RouteCorrection,
    VerifyHint,
    ProcedurePack,
    #[serde(untagged)]
    Other(String),
}

impl ArtifactKind {
    /// Parses a kind label. Unrecognised labels are kept as `Other`.
    pub fn parse(label: &str) -> Self {
        serde_json::from_value(serde_json::Value::String(label.to_owned()))
            .unwrap_or_else(|_| Self::Other(label.to_owned()))
    }
}

/// Unknown kinds are archive-only.
pub fn classify_memory(kind: &ArtifactKind) -> MemoryClass {
    use ArtifactKind::*;
    match kind {
        CommonGroundSnapshot | Packet | AfterActionReview | TrustState | GovernanceLabel => {
            MemoryClass::Canonical
        }
        GovernanceHint | RouteCorrection | VerifyHint | ProcedurePack => {
            MemoryClass::PromptInjectable
        }
        RawLog | ChatResidue | FailedExploration | SyntheticExploration | UnreviewedNote
        | Other(_) => MemoryClass::ArchiveOnly,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryArtifact {
    pub id: String,
    pub kind: ArtifactKind,
    pub class: MemoryClass,
    pub packet_ref: Option<PacketId>,
    pub body: String,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryIndex {
    artifacts: Vec<MemoryArtifact>,
}

impl MemoryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tags and stores an artifact. The class is always derived from the kind.
    pub fn insert(
        &mut self,
        id: &str,
        kind: ArtifactKind,
        packet_ref: Option<PacketId>,
        body: &str,
    ) -> MemoryClass {
        let class = classify_memory(&kind);
        self.artifacts.push(MemoryArtifact {
            id: id.to_owned(),
            kind,
            class,
            packet_ref,
            body: body.to_owned(),
        });
        class
    }

    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    pub fn by_class(&self, class: MemoryClass) -> impl Iterator<Item = &MemoryArtifact> {
        self.artifacts.iter().filter(move |a| a.class == class)
    }

    /// Artifacts eligible for a prompt envelope: canonical state plus
    /// reviewed hints. Archive-only material stays out.
    pub fn envelope(&self) -> Vec<&MemoryArtifact> {
        self.artifacts
            .iter()
            .filter(|a| a.class != MemoryClass::ArchiveOnly)
            .collect()
    }
}

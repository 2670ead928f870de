use serde::{Deserialize, Serialize};

use super::GateError;
use crate::packet::EvidenceQuality;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatePolicy {
    pub evidence_floor: EvidenceQuality,
    /// Fixed on; the key exists so configs state it.
    pub deep_requires_diagnostic_first: bool,
    /// Fixed on; a dismissal only counts when recorded under policy.
    pub advisory_dismissal_requires_record: bool,
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self {
            evidence_floor: EvidenceQuality::Adequate,
            deep_requires_diagnostic_first: true,
            advisory_dismissal_requires_record: true,
        }
    }
}

impl GatePolicy {
    pub fn from_toml(text: &str) -> Result<Self, GateError> {
        let policy: GatePolicy =
            toml::from_str(text).map_err(|e| GateError::Policy(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if !self.deep_requires_diagnostic_first {
            return Err(GateError::Policy(
                "deep_requires_diagnostic_first cannot be disabled".into(),
            ));
        }
        if !self.advisory_dismissal_requires_record {
            return Err(GateError::Policy(
                "advisory_dismissal_requires_record cannot be disabled".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        assert_eq!(GatePolicy::from_toml("").unwrap(), GatePolicy::default());
        let p = GatePolicy::from_toml("evidence_floor = \"strong\"").unwrap();
        assert_eq!(p.evidence_floor, EvidenceQuality::Strong);
    }

    #[test]
    fn fixed_keys_cannot_be_turned_off() {
        assert!(GatePolicy::from_toml("deep_requires_diagnostic_first = false").is_err());
        assert!(GatePolicy::from_toml("advisory_dismissal_requires_record = false").is_err());
        assert!(GatePolicy::from_toml("bogus = 1").is_err());
    }
}

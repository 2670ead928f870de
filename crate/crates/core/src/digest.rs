//! Canonical field serialization and SHA-256 content digests.
//!
//! A canonical record is a set of named fields. Fields are emitted in sorted
//! name order; every name and every value is length-prefixed with a
//! big-endian `u64`, and every value carries a one-byte type tag. Text is
//! UTF-8. Two implementations that follow these rules produce identical
//! digests for identical field sets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Lowercase hex SHA-256 digest (64 characters).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(String);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Wraps an already-computed hex string. Used when loading stored packets.
    pub fn from_hex(hex: impl Into<String>) -> Self {
        Self(hex.into())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

const TAG_TEXT: u8 = b't';
const TAG_LIST: u8 = b'l';
const TAG_INT: u8 = b'i';
const TAG_FLAG: u8 = b'b';
const TAG_ABSENT: u8 = b'n';

#[derive(Debug, Default, Clone)]
pub struct Canonical {
    fields: BTreeMap<String, Vec<u8>>,
}

fn push_len_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
    out.extend_from_slice(bytes);
}

impl Canonical {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, name: &str, value: &str) -> Self {
        let mut v = vec![TAG_TEXT];
        push_len_prefixed(&mut v, value.as_bytes());
        self.fields.insert(name.to_owned(), v);
        self
    }

    pub fn opt_text(self, name: &str, value: Option<&str>) -> Self {
        match value {
            Some(s) => self.text(name, s),
            None => self.absent(name),
        }
    }

    pub fn list<S: AsRef<str>>(mut self, name: &str, items: &[S]) -> Self {
        let mut v = vec![TAG_LIST];
        v.extend_from_slice(&(items.len() as u64).to_be_bytes());
        for item in items {
            push_len_prefixed(&mut v, item.as_ref().as_bytes());
        }
        self.fields.insert(name.to_owned(), v);
        self
    }

    pub fn int(mut self, name: &str, value: u64) -> Self {
        let mut v = vec![TAG_INT];
        v.extend_from_slice(&value.to_be_bytes());
        self.fields.insert(name.to_owned(), v);
        self
    }

    pub fn flag(mut self, name: &str, value: bool) -> Self {
        self.fields
            .insert(name.to_owned(), vec![TAG_FLAG, value as u8]);
        self
    }

    pub fn absent(mut self, name: &str) -> Self {
        self.fields.insert(name.to_owned(), vec![TAG_ABSENT]);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, value) in &self.fields {
            push_len_prefixed(&mut out, name.as_bytes());
            push_len_prefixed(&mut out, value);
        }
        out
    }

    pub fn digest(&self) -> Digest {
        Digest::of_bytes(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_order_does_not_matter() {
        let a = Canonical::new().text("b", "x").int("a", 7).digest();
        let b = Canonical::new().int("a", 7).text("b", "x").digest();
        assert_eq!(a, b);
    }

    #[test]
    fn length_prefix_separates_lists() {
        let a = Canonical::new().list("l", &["ab", "c"]).digest();
        let b = Canonical::new().list("l", &["a", "bc"]).digest();
        assert_ne!(a, b);
    }

    #[test]
    fn known_empty_digest() {
        assert_eq!(
            Canonical::new().digest().as_str(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}

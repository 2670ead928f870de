//! Sortable packet and item identifiers.
//!
//! Identifiers are 26-character ULIDs. The timestamp half comes from a
//! logical clock that advances by one millisecond per mint, so ids minted by
//! one generator sort in mint order. The random half comes from a seeded
//! ChaCha stream, which keeps simulated runs byte-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use ulid::Ulid;

/// Length of every identifier produced by [`IdGen`].
pub const ID_LEN: usize = 26;

/// 2026-01-01T00:00:00Z, the default logical epoch.
pub const DEFAULT_EPOCH_MS: u64 = 1_767_225_600_000;

#[derive(Debug, Clone)]
pub struct IdGen {
    clock_ms: u64,
    rng: ChaCha20Rng,
}

impl IdGen {
    pub fn seeded(seed: u64) -> Self {
        Self::with_epoch(seed, DEFAULT_EPOCH_MS)
    }

    pub fn with_epoch(seed: u64, epoch_ms: u64) -> Self {
        Self {
            clock_ms: epoch_ms,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Generator seeded from OS entropy and wall-clock time, for interactive use.
    pub fn from_entropy() -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(DEFAULT_EPOCH_MS);
        Self {
            clock_ms: now,
            rng: ChaCha20Rng::from_os_rng(),
        }
    }

    pub fn next_id(&mut self) -> String {
        self.clock_ms += 1;
        let random: u128 = self.rng.random();
        Ulid::from_parts(self.clock_ms, random).to_string()
    }
}

impl Default for IdGen {
    fn default() -> Self {
        Self::seeded(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_fixed_length_and_sorted() {
        let mut ids = IdGen::seeded(42);
        let minted: Vec<String> = (0..500).map(|_| ids.next_id()).collect();
        assert!(minted.iter().all(|id| id.len() == ID_LEN));
        let mut sorted = minted.clone();
        sorted.sort();
        assert_eq!(minted, sorted);
    }

    #[test]
    fn same_seed_same_ids() {
        let a: Vec<String> = {
            let mut g = IdGen::seeded(9);
            (0..10).map(|_| g.next_id()).collect()
        };
        let b: Vec<String> = {
            let mut g = IdGen::seeded(9);
            (0..10).map(|_| g.next_id()).collect()
        };
        assert_eq!(a, b);
    }
}

use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::OsRng;
use rand::{SeedableRng, TryRngCore};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ulid::{Generator, Ulid};

use crate::clock::SharedClock;

/// Server-generated entity identifier: a 26-character ULID string, which
/// sorts lexicographically in creation order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Id(String);

impl Id {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Accepts only well-formed ULID strings.
    pub fn parse(s: &str) -> Option<Id> {
        Ulid::from_string(s).ok().map(|u| Id(u.to_string()))
    }
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Id {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Monotonic ULID source. Seeded generators make every ID in a run
/// reproducible when paired with a manual clock.
pub struct IdGenerator {
    clock: SharedClock,
    inner: Mutex<(Generator, ChaCha20Rng)>,
}

impl IdGenerator {
    pub fn new(clock: SharedClock) -> Self {
        IdGenerator::seeded(clock, OsRng.try_next_u64().expect("OS entropy source"))
    }

    pub fn seeded(clock: SharedClock, seed: u64) -> Self {
        IdGenerator {
            clock,
            inner: Mutex::new((Generator::new(), ChaCha20Rng::seed_from_u64(seed))),
        }
    }

    pub fn next_id(&self) -> Id {
        let now = self.clock.now();
        let mut guard = self.inner.lock();
        let (generator, rng) = &mut *guard;
        let ts = std::time::SystemTime::UNIX_EPOCH
            + std::time::Duration::from_millis(now.timestamp_millis().max(0) as u64);
        let ulid = loop {
            match generator.generate_from_datetime_with_source(ts, rng) {
                Ok(u) => break u,
                // Random part overflowed within one millisecond: reset and retry.
                Err(_) => *generator = Generator::new(),
            }
        };
        Id(ulid.to_string())
    }
}

impl fmt::Debug for IdGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdGenerator").finish_non_exhaustive()
    }
}

pub type SharedIds = Arc<IdGenerator>;

/// A fresh 256-bit secret from the OS RNG, hex encoded.
pub fn new_secret() -> String {
    let mut bytes = [0u8; 32];
    OsRng.try_fill_bytes(&mut bytes).expect("OS entropy source");
    hex::encode(bytes)
}

/// SHA-256 of a bearer secret; only the digest is ever persisted.
pub fn secret_digest(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

//! Testbed federation control plane.
//!
//! The [`ControlPlane`] owns the transactional context store and exposes the
//! domain services: [`context`] (labs, testbeds, nodes and their
//! associations), [`federation`] (activations, scripts, agent fleet,
//! run-commands), [`scheduler`], [`sessions`] and [`repos`]. The
//! [`gateway`] maps HTTP requests onto those services; [`agent`] is the
//! enrollable edge agent and [`harness`] drives both ends in-process to
//! measure node access latency.

pub mod agent;
pub mod api;
pub mod auth;
pub mod clock;
pub mod config;
pub mod context;
pub mod error;
pub mod federation;
pub mod gateway;
pub mod harness;
pub mod ids;
pub mod repos;
pub mod scheduler;
pub mod sessions;
pub mod slug;
pub mod store;

use std::sync::Arc;

pub use crate::clock::{Clock, ManualClock, SharedClock, SystemClock};
pub use crate::config::PlaneConfig;
pub use crate::error::{Error, ErrorCode, Result};
pub use crate::ids::Id;

use crate::gateway::audit::AuditLog;
use crate::ids::IdGenerator;
use crate::repos::BlobStore;
use crate::store::Store;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct ControlPlane {
    pub(crate) store: Store,
    pub(crate) clock: SharedClock,
    pub(crate) ids: IdGenerator,
    pub(crate) config: PlaneConfig,
    pub(crate) blobs: BlobStore,
    pub(crate) audit: AuditLog,
    /// Verified against when a login names an unknown user.
    pub(crate) dummy_hash: String,
}

impl std::fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlane")
            .field("db_path", &self.config.db_path)
            .field("revision", &self.store.revision())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub fleet: usize,
    pub reservations: usize,
    pub sessions: usize,
    pub auth: usize,
}

pub struct PlaneBuilder {
    config: PlaneConfig,
    clock: Option<SharedClock>,
    id_seed: Option<u64>,
}

impl PlaneBuilder {
    pub fn clock(mut self, clock: SharedClock) -> Self {
        self.clock = Some(clock);
        self
    }

    /// Seeds the ID generator; with a manual clock this makes IDs
    /// reproducible.
    pub fn id_seed(mut self, seed: u64) -> Self {
        self.id_seed = Some(seed);
        self
    }

    pub fn build(self) -> Result<ControlPlane> {
        let clock = self.clock.unwrap_or_else(|| Arc::new(SystemClock));
        let ids = match self.id_seed {
            Some(seed) => IdGenerator::seeded(clock.clone(), seed),
            None => IdGenerator::new(clock.clone()),
        };
        let store = match &self.config.db_path {
            Some(path) => Store::open(path, self.config.sync_writes)?,
            None => Store::in_memory(),
        };
        let blobs = match self.config.blob_root() {
            Some(root) => BlobStore::dir(root).map_err(Error::storage)?,
            None => BlobStore::memory(),
        };
        let audit = match &self.config.db_path {
            Some(path) => {
                let mut os = path.clone().into_os_string();
                os.push(".audit.jsonl");
                AuditLog::with_file(std::path::PathBuf::from(os)).map_err(Error::storage)?
            }
            None => AuditLog::memory(),
        };
        let dummy_hash = auth::hash_credential("unused dummy credential", self.config.password_hash)?;
        let plane = ControlPlane {
            store,
            clock,
            ids,
            config: self.config,
            blobs,
            audit,
            dummy_hash,
        };
        // Commands left DELIVERED past their deadline by a previous run
        // time out now.
        plane.sweep()?;
        Ok(plane)
    }
}

impl ControlPlane {
    pub fn builder(config: PlaneConfig) -> PlaneBuilder {
        PlaneBuilder {
            config,
            clock: None,
            id_seed: None,
        }
    }

    pub fn config(&self) -> &PlaneConfig {
        &self.config
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn revision(&self) -> u64 {
        self.store.revision()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn context(&self) -> context::ContextStore<'_> {
        context::ContextStore { plane: self }
    }

    pub fn auth(&self) -> auth::Auth<'_> {
        auth::Auth { plane: self }
    }

    pub fn federation(&self) -> federation::Federation<'_> {
        federation::Federation { plane: self }
    }

    pub fn scheduler(&self) -> scheduler::Scheduler<'_> {
        scheduler::Scheduler { plane: self }
    }

    pub fn sessions(&self) -> sessions::Sessions<'_> {
        sessions::Sessions { plane: self }
    }

    pub fn repos(&self) -> repos::Repos<'_> {
        repos::Repos { plane: self }
    }

    /// One pass of every periodic maintenance task.
    pub fn sweep(&self) -> Result<SweepReport> {
        let now = self.clock.now();
        Ok(SweepReport {
            fleet: self.federation().sweep()?,
            reservations: self.scheduler().sweep()?,
            sessions: self.sessions().sweep()?,
            auth: self.auth().purge_expired(now)?,
        })
    }
}

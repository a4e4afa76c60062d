//! Embedded transactional store backing the context manager.
//!
//! The full state lives in memory behind a single lock. Every write runs as
//! a closure over a [`Tx`]; mutations apply in place and are recorded in an
//! undo log, so a closure returning `Err` leaves no trace. Committed
//! transactions are appended to a single JSON-lines journal file, which is
//! replayed on open.

mod journal;
mod state;

use std::path::Path;

use parking_lot::{Mutex, RwLock};

pub use self::journal::Journal;
pub use self::state::{Change, Record, RecordKind, State};
use crate::context::AssociationEdge;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Store {
    state: RwLock<State>,
    journal: Option<Mutex<Journal>>,
}

#[allow(clippy::large_enum_variant)]
enum Undo {
    Put {
        kind: RecordKind,
        key: String,
        prev: Option<Record>,
    },
    EdgeAdded(AssociationEdge),
    EdgeRemoved(AssociationEdge),
}

/// A write transaction. Reads go through `Deref<Target = State>` and see
/// the transaction's own writes.
pub struct Tx<'a> {
    state: &'a mut State,
    changes: Vec<Change>,
    undo: Vec<Undo>,
}

impl std::ops::Deref for Tx<'_> {
    type Target = State;

    fn deref(&self) -> &State {
        self.state
    }
}

impl Tx<'_> {
    pub fn put(&mut self, record: impl Into<Record>) {
        let record = record.into();
        let kind = record.kind();
        let key = record.key().to_string();
        let prev = self.state.apply_put(record.clone());
        self.undo.push(Undo::Put { kind, key, prev });
        self.changes.push(Change::Put(record));
    }

    /// Removes a record outright. Only used for ephemeral rows (auth
    /// sessions); domain entities are tombstoned instead.
    pub fn remove(&mut self, kind: RecordKind, key: &str) {
        if let Some(prev) = self.state.apply_remove(kind, key) {
            self.undo.push(Undo::Put {
                kind,
                key: key.to_string(),
                prev: Some(prev),
            });
            self.changes.push(Change::Remove {
                kind,
                key: key.to_string(),
            });
        }
    }

    /// Adds an edge; returns false if the triple already existed.
    pub fn add_edge(&mut self, edge: AssociationEdge) -> bool {
        if self.state.apply_edge_add(edge.clone()) {
            self.undo.push(Undo::EdgeAdded(edge.clone()));
            self.changes.push(Change::EdgeAdd(edge));
            true
        } else {
            false
        }
    }

    pub fn remove_edge(&mut self, edge: &AssociationEdge) {
        if self.state.apply_edge_remove(edge) {
            self.undo.push(Undo::EdgeRemoved(edge.clone()));
            self.changes.push(Change::EdgeRemove(edge.clone()));
        }
    }

    fn rollback(self) {
        for undo in self.undo.into_iter().rev() {
            match undo {
                Undo::Put { kind, key, prev } => match prev {
                    Some(prev) => {
                        self.state.apply_put(prev);
                    }
                    None => {
                        self.state.apply_remove(kind, &key);
                    }
                },
                Undo::EdgeAdded(edge) => {
                    self.state.apply_edge_remove(&edge);
                }
                Undo::EdgeRemoved(edge) => {
                    self.state.apply_edge_add(edge);
                }
            }
        }
    }
}

impl Store {
    /// A store with no backing file. Contents vanish on drop.
    pub fn in_memory() -> Self {
        Store {
            state: RwLock::new(State::default()),
            journal: None,
        }
    }

    /// Opens (or creates) the single-file store at `path`, replaying every
    /// committed transaction. `sync` controls fsync after each commit.
    pub fn open(path: impl AsRef<Path>, sync: bool) -> Result<Self> {
        let (journal, state) = Journal::open(path.as_ref(), sync).map_err(Error::storage)?;
        Ok(Store {
            state: RwLock::new(state),
            journal: Some(Mutex::new(journal)),
        })
    }

    pub fn read<R>(&self, f: impl FnOnce(&State) -> R) -> R {
        f(&self.state.read())
    }

    /// Runs `f` as a serializable transaction. On `Err` every mutation is
    /// undone; on `Ok` the changes are journaled and the revision bumped.
    pub fn write<R>(&self, f: impl FnOnce(&mut Tx<'_>) -> Result<R>) -> Result<R> {
        let mut guard = self.state.write();
        let mut tx = Tx {
            state: &mut guard,
            changes: Vec::new(),
            undo: Vec::new(),
        };
        let out = match f(&mut tx) {
            Ok(out) => out,
            Err(err) => {
                tx.rollback();
                return Err(err);
            }
        };
        if tx.changes.is_empty() {
            return Ok(out);
        }
        let revision = tx.state.revision + 1;
        if let Some(journal) = &self.journal {
            if let Err(err) = journal.lock().append(revision, &tx.changes) {
                tx.rollback();
                return Err(Error::storage(err));
            }
        }
        tx.state.revision = revision;
        Ok(out)
    }

    pub fn revision(&self) -> u64 {
        self.state.read().revision
    }
}

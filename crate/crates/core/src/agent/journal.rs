//! The agent's append-only local journal: which commands were taken, which
//! results still await acknowledgement, and which sessions are running.
//! Replayed at start-up so a restarted agent neither re-executes commands
//! nor forgets running sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::api::ResultRequest;
use crate::ids::Id;

use super::runtime::{LocalSession, LocalState};

const COMPACT_AFTER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "e", rename_all = "snake_case")]
pub enum JournalEvent {
    CommandTaken { command_id: Id },
    ResultPending(ResultRequest),
    ResultAcked { command_id: Id },
    SessionStarted(LocalSession),
    SessionStopped { session_id: Id, state: LocalState },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recovered {
    pub taken: BTreeSet<Id>,
    pub pending: BTreeMap<Id, ResultRequest>,
    pub sessions: BTreeMap<Id, LocalSession>,
}

impl Recovered {
    fn apply(&mut self, ev: JournalEvent) {
        match ev {
            JournalEvent::CommandTaken { command_id } => {
                self.taken.insert(command_id);
            }
            JournalEvent::ResultPending(r) => {
                self.taken.insert(r.command_id.clone());
                self.pending.insert(r.command_id.clone(), r);
            }
            JournalEvent::ResultAcked { command_id } => {
                self.pending.remove(&command_id);
            }
            JournalEvent::SessionStarted(s) => {
                self.sessions.insert(s.session_id.clone(), s);
            }
            JournalEvent::SessionStopped { session_id, state } => {
                if let Some(s) = self.sessions.get_mut(&session_id) {
                    s.state = state;
                }
            }
        }
    }

    fn snapshot(&self) -> Vec<JournalEvent> {
        let mut out: Vec<JournalEvent> = self
            .taken
            .iter()
            .map(|id| JournalEvent::CommandTaken { command_id: id.clone() })
            .collect();
        out.extend(self.pending.values().cloned().map(JournalEvent::ResultPending));
        out.extend(
            self.sessions
                .values()
                .filter(|s| s.state == LocalState::Running)
                .cloned()
                .map(JournalEvent::SessionStarted),
        );
        out
    }
}

#[derive(Debug)]
pub struct AgentJournal {
    file: Option<(PathBuf, File)>,
}

impl AgentJournal {
    pub fn memory() -> Self {
        AgentJournal { file: None }
    }

    /// Opens or creates the journal, returning what it recorded. A torn
    /// final line (crash mid-write) is ignored.
    pub fn open(path: &Path) -> std::io::Result<(Self, Recovered)> {
        let mut rec = Recovered::default();
        let mut lines = 0usize;
        if let Ok(bytes) = std::fs::read(path) {
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if complete < bytes.len() {
                OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
            }
            for line in BufReader::new(&bytes[..complete]).lines() {
                let line = line?;
                lines += 1;
                match serde_json::from_str::<JournalEvent>(&line) {
                    Ok(ev) => rec.apply(ev),
                    Err(err) => tracing::warn!(%err, "skipping unreadable journal line"),
                }
            }
        }
        if lines > COMPACT_AFTER {
            let tmp = path.with_extension("compact");
            {
                let mut f = File::create(&tmp)?;
                for ev in rec.snapshot() {
                    serde_json::to_writer(&mut f, &ev)?;
                    f.write_all(b"\n")?;
                }
                f.sync_all()?;
            }
            std::fs::rename(&tmp, path)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            AgentJournal {
                file: Some((path.to_path_buf(), file)),
            },
            rec,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn append(&mut self, ev: &JournalEvent) {
        let Some((_, file)) = &mut self.file else { return };
        let mut line = serde_json::to_vec(ev).expect("journal events serialize");
        line.push(b'\n');
        if let Err(err) = file.write_all(&line).and_then(|_| file.sync_data()) {
            tracing::error!(%err, "agent journal write failed");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::ResultOutcome;
    use crate::clock::ManualClock;
    use crate::ids::IdGenerator;
    use std::sync::Arc;

    #[test]
    fn replay_restores_taken_pending_and_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.journal");
        let ids = IdGenerator::seeded(Arc::new(ManualClock::at_epoch()), 1);
        let (c1, c2, s1) = (ids.next_id(), ids.next_id(), ids.next_id());
        {
            let (mut j, rec) = AgentJournal::open(&path).unwrap();
            assert_eq!(rec, Recovered::default());
            j.append(&JournalEvent::CommandTaken { command_id: c1.clone() });
            j.append(&JournalEvent::ResultPending(ResultRequest {
                command_id: c1.clone(),
                outcome: ResultOutcome::Exited,
                exit_status: Some(0),
                output: "ok".into(),
                access_url: None,
                error_code: None,
            }));
            j.append(&JournalEvent::CommandTaken { command_id: c2.clone() });
            j.append(&JournalEvent::SessionStarted(LocalSession {
                session_id: s1.clone(),
                image_ref: "img".into(),
                state: LocalState::Running,
                access_port: 36000,
                access_url: "http://h:36000/".into(),
                started_at: chrono::Utc::now(),
            }));
        }
        // Torn tail.
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"e\":\"comm").unwrap();
        let (mut j, rec) = AgentJournal::open(&path).unwrap();
        assert_eq!(rec.taken.len(), 2);
        assert!(rec.pending.contains_key(&c1));
        assert_eq!(rec.sessions[&s1].state, LocalState::Running);
        j.append(&JournalEvent::ResultAcked { command_id: c1.clone() });
        j.append(&JournalEvent::SessionStopped { session_id: s1.clone(), state: LocalState::Stopped });
        drop(j);
        let (_, rec) = AgentJournal::open(&path).unwrap();
        assert!(rec.pending.is_empty());
        assert_eq!(rec.sessions[&s1].state, LocalState::Stopped);
    }
}

//! Request audit trail: one record per gateway response.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Records kept in memory for inspection; the file (if any) keeps all.
const MEMORY_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: DateTime<Utc>,
    /// `user:<id>`, `agent:<node id>` or `anonymous`.
    pub actor: String,
    pub method: String,
    /// Path without query string.
    pub path: String,
    pub action: String,
    pub status: u16,
    /// `OK` or the error code.
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug)]
pub struct AuditLog {
    recent: Mutex<VecDeque<AuditRecord>>,
    file: Option<Mutex<File>>,
}

impl AuditLog {
    pub fn memory() -> Self {
        AuditLog {
            recent: Mutex::new(VecDeque::new()),
            file: None,
        }
    }

    pub fn with_file(path: PathBuf) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            recent: Mutex::new(VecDeque::new()),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn record(&self, rec: AuditRecord) {
        tracing::info!(
            target: "audit",
            actor = %rec.actor,
            method = %rec.method,
            path = %rec.path,
            status = rec.status,
            outcome = %rec.outcome,
            "request"
        );
        if let Some(file) = &self.file {
            if let Ok(mut line) = serde_json::to_vec(&rec) {
                line.push(b'\n');
                if let Err(err) = file.lock().write_all(&line) {
                    tracing::error!(%err, "audit log write failed");
                }
            }
        }
        let mut recent = self.recent.lock();
        if recent.len() == MEMORY_CAP {
            recent.pop_front();
        }
        recent.push_back(rec);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.recent.lock().iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.recent.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

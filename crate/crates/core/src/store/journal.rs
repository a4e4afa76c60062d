use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::{Change, State};

/// Journal lines above which the file is rewritten as one snapshot on open.
const COMPACT_AFTER: usize = 50_000;

#[derive(Serialize, Deserialize)]
struct Entry {
    rev: u64,
    changes: Vec<Change>,
}

/// Append-only transaction log.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl Journal {
    pub fn open(path: &Path, sync: bool) -> io::Result<(Journal, State)> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut state = State::default();
        let mut lines = 0usize;
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut offset = 0u64;
            for line in reader.split(b'\n') {
                let line = line?;
                let line_len = line.len() as u64 + 1;
                // A torn final write is the only tolerated corruption.
                let Ok(entry) = serde_json::from_slice::<Entry>(&line) else {
                    break;
                };
                for change in entry.changes {
                    state.apply(change);
                }
                state.revision = entry.rev;
                offset += line_len;
                valid_len = offset;
                lines += 1;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        let mut journal = Journal {
            path: path.to_path_buf(),
            file,
            sync,
        };
        if lines > COMPACT_AFTER {
            journal.compact(&state)?;
        }
        Ok((journal, state))
    }

    pub fn append(&mut self, rev: u64, changes: &[Change]) -> io::Result<()> {
        let mut line = serde_json::to_vec(&EntryRef { rev, changes })?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    /// Rewrites the journal as a single entry holding the full state.
    pub fn compact(&mut self, state: &State) -> io::Result<()> {
        let tmp = self.path.with_extension("compact.tmp");
        {
            let mut out = File::create(&tmp)?;
            let changes = state.snapshot_changes();
            let mut line = serde_json::to_vec(&EntryRef {
                rev: state.revision,
                changes: &changes,
            })?;
            line.push(b'\n');
            out.write_all(&line)?;
            out.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct EntryRef<'a> {
    rev: u64,
    changes: &'a [Change],
}

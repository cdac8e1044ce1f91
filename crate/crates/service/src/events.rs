//! Append-only per-session event log (one JSON object per line).

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rarequery_core::protocol::CreateSessionRequest;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        request: CreateSessionRequest,
    },
    BatchIssued {
        round: usize,
        ids: Vec<usize>,
    },
    /// Written and synced before training starts.
    LabelsReceived {
        round: usize,
        ids: Vec<usize>,
        labels: Vec<bool>,
    },
    RoundTrained {
        round: usize,
        labels_used: usize,
    },
}

pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Reads every complete event. A torn final line (no trailing newline,
/// unparseable) is cut off the file so later appends stay well formed; a
/// bad line anywhere else is an error.
pub fn read_events(path: &Path) -> std::io::Result<Vec<Event>> {
    let bytes = fs::read(path)?;
    let mut events = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| offset + i);
        let line = &bytes[offset..end.unwrap_or(bytes.len())];
        match serde_json::from_slice::<Event>(line) {
            Ok(e) => events.push(e),
            Err(_) if end.is_none() => {
                tracing::warn!(path = %path.display(), "dropping torn trailing event");
                OpenOptions::new()
                    .write(true)
                    .open(path)?
                    .set_len(offset as u64)?;
                break;
            }
            Err(e) if line.iter().all(|b| b.is_ascii_whitespace()) => {
                let _ = e;
            }
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}: bad event at byte {offset}: {e}", path.display()),
                ))
            }
        }
        offset = end.map(|e| e + 1).unwrap_or(bytes.len());
    }
    Ok(events)
}

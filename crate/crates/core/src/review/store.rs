//! Append-only JSON-lines event log, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{DecisionRecord, Session, StudyCondition, SurveyResponse};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session: Session,
    },
    CaseIssued {
        condition: StudyCondition,
        case_id: String,
        at_ms: u64,
    },
    Decision {
        record: DecisionRecord,
    },
    /// The operator moved past an auto-decided case.
    CaseAcknowledged {
        condition: StudyCondition,
        case_id: String,
        at_ms: u64,
    },
    Survey {
        response: SurveyResponse,
    },
}

#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

impl EventStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    pub fn append(&self, session_id: &str, event: &Event) -> Result<()> {
        let path = self.path(session_id);
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        f.flush().map_err(|e| Error::io(&path, e))
    }

    /// Session ids with a log on disk, sorted.
    pub fn session_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_suffix(".jsonl") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Reads a session's events. A torn final line (crash mid-write) is
    /// dropped; corruption anywhere else is an error.
    pub fn read(&self, session_id: &str) -> Result<Vec<Event>> {
        let path = self.path(session_id);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let lines: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(&path, e))?;
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(ev) => events.push(ev),
                Err(e) if i + 1 == lines.len() => {
                    log::warn!("{}: dropping torn final line: {e}", path.display());
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(events)
    }
}

//! Append-only per-session JSONL journal. The first line is a snapshot;
//! later lines are snapshots or turns. Every append is fsynced before the
//! caller acknowledges it.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use mcat_core::adaptive::Session;
use serde::{Deserialize, Serialize};

use crate::api::AnswerResponse;

pub const RECORD_SCHEMA: &str = "mcat.session-record/v1";

/// Persisted session state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub schema: String,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub respondent: Option<String>,
    pub session: Session,
    /// Stored responses by submission token.
    pub submissions: IndexMap<String, AnswerResponse>,
}

/// One committed answer; replaying it through the engine reproduces the
/// state after the turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnEntry {
    pub question: String,
    pub category: usize,
    pub timestamp_ms: u64,
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case", deny_unknown_fields)]
pub enum JournalEntry {
    Snapshot { record: Box<SessionRecord> },
    Turn { turn: TurnEntry },
}

/// Open journal file for one session.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    turns_since_snapshot: usize,
}

/// Parsed journal contents: the latest snapshot and the turns after it.
#[derive(Debug)]
pub struct JournalContents {
    pub snapshot: SessionRecord,
    pub turns: Vec<TurnEntry>,
    /// Bytes dropped from a torn final line.
    pub truncated: u64,
}

fn line(entry: &JournalEntry) -> std::io::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(entry)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn sync_dir(dir: &Path) -> std::io::Result<()> {
    File::open(dir)?.sync_all()
}

impl Journal {
    pub fn path_for(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.jsonl"))
    }

    /// Creates a new journal holding `record`; fails if it already exists.
    pub fn create(dir: &Path, record: &SessionRecord) -> std::io::Result<Self> {
        let path = Self::path_for(dir, &record.session.id);
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        file.write_all(&line(&JournalEntry::Snapshot {
            record: Box::new(record.clone()),
        })?)?;
        file.sync_all()?;
        sync_dir(dir)?;
        Ok(Self {
            path,
            file,
            turns_since_snapshot: 0,
        })
    }

    /// Reads a journal, dropping (and truncating away) a torn final line.
    /// A malformed line anywhere else is an error.
    pub fn open(path: &Path) -> std::io::Result<(Self, JournalContents)> {
        let mut file = OpenOptions::new().read(true).append(true).open(path)?;
        let mut reader = BufReader::new(&mut file);
        let mut snapshot: Option<SessionRecord> = None;
        let mut turns = Vec::new();
        let mut good_len = 0u64;
        let mut buf = String::new();
        let mut bad_at: Option<u64> = None;
        let mut lineno = 0usize;
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 {
                break;
            }
            lineno += 1;
            if bad_at.is_some() {
                return Err(corrupt(path, lineno - 1, "malformed entry before end of journal"));
            }
            let complete = buf.ends_with('\n');
            match serde_json::from_str::<JournalEntry>(buf.trim_end()) {
                Ok(entry) if complete => {
                    match entry {
                        JournalEntry::Snapshot { record } => {
                            snapshot = Some(*record);
                            turns.clear();
                        }
                        JournalEntry::Turn { turn } => {
                            if snapshot.is_none() {
                                return Err(corrupt(path, lineno, "turn before first snapshot"));
                            }
                            turns.push(turn);
                        }
                    }
                    good_len += n as u64;
                }
                _ => bad_at = Some(good_len),
            }
        }
        drop(reader);
        let total = file.seek(SeekFrom::End(0))?;
        let truncated = total - good_len;
        if truncated > 0 {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        let snapshot = snapshot.ok_or_else(|| corrupt(path, 1, "no snapshot"))?;
        let journal = Self {
            path: path.to_path_buf(),
            file,
            turns_since_snapshot: turns.len(),
        };
        Ok((
            journal,
            JournalContents {
                snapshot,
                turns,
                truncated,
            },
        ))
    }

    pub fn append_turn(&mut self, turn: &TurnEntry) -> std::io::Result<()> {
        self.file.write_all(&line(&JournalEntry::Turn { turn: turn.clone() })?)?;
        self.file.sync_data()?;
        self.turns_since_snapshot += 1;
        Ok(())
    }

    pub fn turns_since_snapshot(&self) -> usize {
        self.turns_since_snapshot
    }

    /// Atomically replaces the journal with a single snapshot.
    pub fn compact(&mut self, record: &SessionRecord) -> std::io::Result<()> {
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&line(&JournalEntry::Snapshot {
                record: Box::new(record.clone()),
            })?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent() {
            sync_dir(dir)?;
        }
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        self.turns_since_snapshot = 0;
        Ok(())
    }
}

fn corrupt(path: &Path, line: usize, what: &str) -> std::io::Error {
    std::io::Error::new(
        std::io::ErrorKind::InvalidData,
        format!("{}: line {line}: {what}", path.display()),
    )
}

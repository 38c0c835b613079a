//! Append-only case event log, one JSON record per line.
//!
//! Records carry a sequence number that starts at 1 and grows by exactly one
//! per line. A final line without its newline is the trace of an interrupted
//! write: it is dropped with a warning and cut off before the next append.
//! Anything else out of place is corruption.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use petition_core::workflow::CaseEvent;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub case_id: String,
    #[serde(flatten)]
    pub event: CaseEvent,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("event log corrupt at seq {seq}: expected seq {expected}")]
    SeqGap { seq: u64, expected: u64 },
    #[error("event log corrupt at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("event log is unusable after a failed write")]
    Poisoned,
}

#[derive(Debug, Default)]
pub struct Replay {
    pub records: Vec<LogRecord>,
    /// Length in bytes of the complete lines.
    pub valid_len: u64,
    /// Bytes of an unterminated final line, if there was one.
    pub torn_bytes: usize,
}

impl Replay {
    pub fn last_seq(&self) -> u64 {
        self.records.last().map_or(0, |r| r.seq)
    }
}

/// Reads and checks a whole log. A missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Replay, LogError> {
    let data = match std::fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Replay::default()),
        Err(source) => return Err(LogError::Io { path: path.display().to_string(), source }),
    };
    let complete = data.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut replay = Replay { records: Vec::new(), valid_len: complete as u64, torn_bytes: data.len() - complete };
    if replay.torn_bytes > 0 {
        log::warn!("{}: discarding {} bytes of a torn final record", path.display(), replay.torn_bytes);
    }
    for (i, line) in data[..complete].split_inclusive(|&b| b == b'\n').enumerate() {
        let line = &line[..line.len() - 1];
        let record: LogRecord = serde_json::from_slice(line)
            .map_err(|e| LogError::Malformed { line: i + 1, reason: e.to_string() })?;
        let expected = replay.last_seq() + 1;
        if record.seq != expected {
            return Err(LogError::SeqGap { seq: record.seq, expected });
        }
        replay.records.push(record);
    }
    Ok(replay)
}

/// The single writer of a log file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
    fsync: bool,
    poisoned: bool,
}

impl EventLog {
    /// Replays the existing log, trims a torn tail, and positions the
    /// writer after the last complete record.
    pub fn open(path: &Path, fsync: bool) -> Result<(EventLog, Replay), LogError> {
        let replay = read_log(path)?;
        let io_err = |source| LogError::Io { path: path.display().to_string(), source };
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        if replay.torn_bytes > 0 {
            file.set_len(replay.valid_len).map_err(io_err)?;
        }
        let log = EventLog { path: path.to_path_buf(), file, next_seq: replay.last_seq() + 1, fsync, poisoned: false };
        Ok((log, replay))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    /// Writes one record as a single line. After a failed write the log
    /// refuses further appends, since the file may hold a partial line.
    pub fn append(&mut self, case_id: &str, at: DateTime<Utc>, event: CaseEvent) -> Result<LogRecord, LogError> {
        if self.poisoned {
            return Err(LogError::Poisoned);
        }
        let record = LogRecord { seq: self.next_seq, at, case_id: case_id.to_string(), event };
        let mut line = serde_json::to_vec(&record).expect("log records serialize");
        line.push(b'\n');
        let written = self.file.write_all(&line).and_then(|()| if self.fsync { self.file.sync_data() } else { Ok(()) });
        if let Err(source) = written {
            self.poisoned = true;
            return Err(LogError::Io { path: self.path.display().to_string(), source });
        }
        self.next_seq += 1;
        Ok(record)
    }
}

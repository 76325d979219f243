//! Append-only JSONL event log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use super::{FeedbackEvent, NewEvent, State, EVENT_SCHEMA_VERSION};
use crate::{Error, Result};

const ID_WIDTH: usize = 12;

/// Zero-padded so lexicographic and numeric order agree.
pub fn format_event_id(n: u64) -> String {
    format!("{n:0ID_WIDTH$}")
}

pub fn parse_event_id(id: &str) -> Result<u64> {
    if id.len() != ID_WIDTH || !id.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Argument(format!("malformed event id {id:?}")));
    }
    id.parse().map_err(|_| Error::Argument(format!("malformed event id {id:?}")))
}

/// Parse a log. Any malformed line, or an event that does not fold cleanly,
/// is fatal and reported with its 1-based line number.
pub fn parse_log(text: &str) -> Result<(Vec<FeedbackEvent>, State)> {
    let mut state = State::new();
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let event: FeedbackEvent = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        state.apply(&event).map_err(|e| err(e.to_string()))?;
        events.push(event);
    }
    Ok((events, state))
}

/// Rebuild state from the log file; a missing file is an empty log.
pub fn replay_log(path: &Path) -> Result<State> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_log(&text).map(|(_, s)| s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(State::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

struct Inner {
    file: File,
    state: State,
    next_id: u64,
}

/// Single appender: validates each event against the current state, writes
/// it, and syncs to disk before returning.
pub struct EventLog {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl EventLog {
    /// Open (or create) the log, replaying existing events.
    pub fn open(path: &Path) -> Result<Self> {
        let state = replay_log(path)?;
        let next_id = match &state.last_event_id {
            Some(id) => parse_event_id(id)? + 1,
            None => 1,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            path: path.to_owned(),
            inner: Mutex::new(Inner { file, state, next_id }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, new: NewEvent) -> Result<FeedbackEvent> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        self.append_at(new, now)
    }

    /// Append with an explicit timestamp (UTC milliseconds).
    pub fn append_at(&self, new: NewEvent, timestamp: u64) -> Result<FeedbackEvent> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let event = FeedbackEvent {
            v: EVENT_SCHEMA_VERSION,
            event_id: format_event_id(inner.next_id),
            timestamp,
            image_id: new.image_id,
            payload: new.payload,
        };
        let mut next = inner.state.clone();
        next.apply(&event)?;
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        inner.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        inner.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        inner.state = next;
        inner.next_id += 1;
        Ok(event)
    }

    /// Snapshot of the folded state.
    pub fn state(&self) -> State {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).state.clone()
    }

    /// Run `f` against the current state under the log lock.
    pub fn with_state<T>(&self, f: impl FnOnce(&State) -> T) -> T {
        f(&self.inner.lock().unwrap_or_else(|p| p.into_inner()).state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::EventPayload;

    #[test]
    fn event_ids_are_padded() {
        assert_eq!(format_event_id(42), "000000000042");
        assert_eq!(parse_event_id("000000000042").unwrap(), 42);
        assert!(parse_event_id("42").is_err());
        assert!(parse_event_id("00000000004x").is_err());
    }

    #[test]
    fn empty_log_is_empty_state() {
        assert_eq!(parse_log("").unwrap().1, State::new());
        assert_eq!(replay_log(Path::new("/nonexistent/capfeed.log")).unwrap(), State::new());
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::open(&dir.path().join("events.jsonl")).unwrap();
        for _ in 0..2 {
            log.append(NewEvent {
                image_id: "i".into(),
                payload: EventPayload::CaptionCorrection { text: "a dog".into(), predicted_caption_id: None },
            })
            .unwrap();
        }
        let mut text = std::fs::read_to_string(log.path()).unwrap();
        text.push_str("{\"v\":1,\n");
        match parse_log(&text) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejected_event_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let log = EventLog::open(&dir.path().join("events.jsonl")).unwrap();
        let bad = NewEvent {
            image_id: "i".into(),
            payload: EventPayload::CaptionCorrection { text: "...".into(), predicted_caption_id: None },
        };
        assert!(log.append(bad).is_err());
        assert_eq!(std::fs::read_to_string(log.path()).unwrap(), "");
        assert_eq!(log.state().event_count, 0);
    }
}

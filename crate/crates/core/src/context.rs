//! Append-only per-session event log and its transcript rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lines of context joined to prompts unless configured otherwise.
pub const DEFAULT_TRANSCRIPT_LINES: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn random() -> Self {
        Self(uuid::Uuid::new_v4().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SessionId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Senior,
    Keeper,
    Robot,
    System,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::Senior => "senior",
            Actor::Keeper => "keeper",
            Actor::Robot => "robot",
            Actor::System => "system",
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "senior" => Ok(Actor::Senior),
            "keeper" => Ok(Actor::Keeper),
            "robot" => Ok(Actor::Robot),
            "system" => Ok(Actor::System),
            other => Err(format!("unknown actor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Heard,
    Said,
    TaskStarted,
    TaskStateChanged,
    TaskCompleted,
    IntentLearned,
    SlotLearned,
    OptionsLearned,
    ActionPerformed,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Heard => "Heard",
            EventKind::Said => "Said",
            EventKind::TaskStarted => "TaskStarted",
            EventKind::TaskStateChanged => "TaskStateChanged",
            EventKind::TaskCompleted => "TaskCompleted",
            EventKind::IntentLearned => "IntentLearned",
            EventKind::SlotLearned => "SlotLearned",
            EventKind::OptionsLearned => "OptionsLearned",
            EventKind::ActionPerformed => "ActionPerformed",
        }
    }

    fn needs_text(self) -> bool {
        matches!(self, EventKind::Heard | EventKind::Said)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type Payload = BTreeMap<String, String>;

/// Builds a payload from `(key, value)` pairs.
pub fn payload<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Payload {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub seq: u64,
    /// Unix milliseconds. Informational; ordering comes from `seq`.
    pub wall_time: u64,
    pub actor: Actor,
    pub kind: EventKind,
    pub payload: Payload,
}

impl ContextEvent {
    pub fn text(&self) -> Option<&str> {
        self.payload.get("text").map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }

    /// `text` when present, otherwise the sorted `key=value` pairs.
    pub fn primary_text(&self) -> String {
        match self.text() {
            Some(t) => t.to_string(),
            None => self
                .payload
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(", "),
        }
    }

    pub fn transcript_line(&self) -> String {
        format!("[{}] {}: {}", self.actor, self.kind, self.primary_text())
    }

    /// Same event with the wall clock zeroed, for determinism comparisons.
    pub fn without_wall_time(&self) -> Self {
        Self {
            wall_time: 0,
            ..self.clone()
        }
    }
}

/// Renders the newest `max_events` events, one line each, newest last.
pub fn render_transcript(events: &[ContextEvent], max_events: usize) -> String {
    let start = events.len().saturating_sub(max_events);
    events[start..]
        .iter()
        .map(ContextEvent::transcript_line)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("unknown session `{0}`")]
    UnknownSession(SessionId),
    #[error("session `{0}` already exists")]
    DuplicateSession(SessionId),
    #[error("{0:?} events need a non-empty `text` payload")]
    MissingText(EventKind),
    #[error("corrupt event log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("event log i/o: {0}")]
    Io(#[from] std::io::Error),
}

type Listener = Box<dyn Fn(&SessionId, &ContextEvent) + Send + Sync>;

#[derive(Default)]
struct SessionLog {
    events: Vec<ContextEvent>,
}

/// Session logs keyed by id. Each session's log is serialized behind its own lock.
#[derive(Default)]
pub struct ContextStore {
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<SessionLog>>>>,
    listeners: RwLock<Vec<Listener>>,
}

impl fmt::Debug for ContextStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.sessions.read().map(|s| s.len()).unwrap_or(0);
        f.debug_struct("ContextStore").field("sessions", &n).finish()
    }
}

impl ContextStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_session(&self, id: SessionId) -> Result<(), ContextError> {
        let mut sessions = self.sessions.write().unwrap();
        if sessions.contains_key(&id) {
            return Err(ContextError::DuplicateSession(id));
        }
        sessions.insert(id, Arc::default());
        Ok(())
    }

    pub fn has_session(&self, id: &SessionId) -> bool {
        self.sessions.read().unwrap().contains_key(id)
    }

    /// Called after every append, while the session log is still locked,
    /// so listeners observe events in seq order.
    pub fn add_listener(&self, listener: impl Fn(&SessionId, &ContextEvent) + Send + Sync + 'static) {
        self.listeners.write().unwrap().push(Box::new(listener));
    }

    fn log(&self, id: &SessionId) -> Result<Arc<Mutex<SessionLog>>, ContextError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ContextError::UnknownSession(id.clone()))
    }

    pub fn append(
        &self,
        session: &SessionId,
        actor: Actor,
        kind: EventKind,
        payload: Payload,
    ) -> Result<ContextEvent, ContextError> {
        if kind.needs_text() && payload.get("text").is_none_or(|t| t.trim().is_empty()) {
            return Err(ContextError::MissingText(kind));
        }
        let log = self.log(session)?;
        let mut log = log.lock().unwrap();
        let event = ContextEvent {
            seq: log.events.len() as u64 + 1,
            wall_time: now_millis(),
            actor,
            kind,
            payload,
        };
        log.events.push(event.clone());
        for listener in self.listeners.read().unwrap().iter() {
            listener(session, &event);
        }
        Ok(event)
    }

    pub fn events(&self, session: &SessionId, from_seq: u64) -> Result<Vec<ContextEvent>, ContextError> {
        let log = self.log(session)?;
        let log = log.lock().unwrap();
        let skip = from_seq.saturating_sub(1) as usize;
        Ok(log.events.iter().skip(skip).cloned().collect())
    }

    pub fn last_seq(&self, session: &SessionId) -> Result<u64, ContextError> {
        let log = self.log(session)?;
        let n = log.lock().unwrap().events.len();
        Ok(n as u64)
    }

    pub fn transcript(&self, session: &SessionId, max_events: usize) -> Result<String, ContextError> {
        let log = self.log(session)?;
        let log = log.lock().unwrap();
        Ok(render_transcript(&log.events, max_events))
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Writes events as newline-delimited JSON.
pub fn export_ndjson<W: Write>(events: &[ContextEvent], mut out: W) -> Result<(), ContextError> {
    for event in events {
        let line = serde_json::to_string(event).expect("event serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads newline-delimited JSON events. Blank lines are skipped.
pub fn import_ndjson<R: BufRead>(input: R) -> Result<Vec<ContextEvent>, ContextError> {
    let mut events = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: ContextEvent = serde_json::from_str(&line).map_err(|e| ContextError::CorruptLog {
            line: idx + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

//! Session layer: owns sessions, feeds utterances to the task runtime, applies
//! robot actions to the simulated world and plays the scripted keeper.
//!
//! Input and output are text. A speech front end would call
//! [`Gateway::post_utterance`] with recognized text and speak what arrives on
//! the `utterances.out` topic.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::bus::{topic, Bus, BusMessage};
use crate::catalog::{Catalog, CatalogError, SharedCatalog};
use crate::context::{
    payload, Actor, ContextError, ContextEvent, ContextStore, EventKind, SessionId, DEFAULT_TRANSCRIPT_LINES,
};
use crate::llm::{CompletionBackend, Interpretation, LlmError};
use crate::runtime::{Effect, EngineEvent, SessionJournal, StepContext, TaskError, TaskInstance, TaskRuntime};
use crate::world::{apply_action, keeper_reply, RobotAction, WorldConfig, WorldError, WorldState};

/// Effects processed per utterance before the step is abandoned.
pub const MAX_EFFECTS_PER_STEP: usize = 1024;

pub const UNKNOWN_REQUEST_REPLY: &str = "Sorry, I don't know how to do that yet.";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown session `{0}`")]
    UnknownSession(SessionId),
    #[error("session `{0}` is closed")]
    SessionClosed(SessionId),
    #[error("{actor} may not post here: {reason}")]
    ActorNotAllowed { actor: Actor, reason: String },
    #[error("backend `{0}` is not available")]
    BackendUnavailable(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("step did not reach quiescence after {0} effects")]
    Runaway(usize),
    #[error(transparent)]
    Task(TaskError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

impl From<TaskError> for GatewayError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Language(LlmError::BackendFailure(b)) => GatewayError::BackendFailure(b.to_string()),
            TaskError::Language(LlmError::MalformedCompletion(m)) => GatewayError::BackendFailure(m),
            other => GatewayError::Task(other),
        }
    }
}

impl From<LlmError> for GatewayError {
    fn from(e: LlmError) -> Self {
        TaskError::Language(e).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeeperMode {
    ScriptedKeeper,
    HumanKeeper,
}

impl std::str::FromStr for KeeperMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted_keeper" | "scripted" => Ok(KeeperMode::ScriptedKeeper),
            "human_keeper" | "human" => Ok(KeeperMode::HumanKeeper),
            other => Err(format!("unknown keeper mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Quiescent,
    Closed,
}

/// Whose input a quiescent session waits for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Awaiting {
    Senior,
    Keeper,
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: SessionId,
    pub mode: KeeperMode,
    pub status: SessionStatus,
    pub backend: String,
    pub awaiting: Awaiting,
    pub world: WorldState,
    pub task: Option<TaskInstance>,
    pub finished_tasks: Vec<TaskInstance>,
}

struct SessionRuntime {
    id: SessionId,
    mode: KeeperMode,
    status: SessionStatus,
    world_config: WorldConfig,
    world: WorldState,
    backend: Arc<dyn CompletionBackend>,
    instance: Option<TaskInstance>,
    finished: Vec<TaskInstance>,
    /// Attributes the scripted keeper already asked about in this errand.
    asked_history: Vec<String>,
    awaiting: Awaiting,
}

impl SessionRuntime {
    fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            mode: self.mode,
            status: self.status,
            backend: self.backend.identity().to_string(),
            awaiting: self.awaiting,
            world: self.world.clone(),
            task: self.instance.clone(),
            finished_tasks: self.finished.clone(),
        }
    }
}

pub struct Gateway {
    catalog: SharedCatalog,
    catalog_path: Option<PathBuf>,
    runtime: TaskRuntime,
    backends: RwLock<HashMap<String, Arc<dyn CompletionBackend>>>,
    world: WorldConfig,
    store: Arc<ContextStore>,
    bus: Arc<Bus>,
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<SessionRuntime>>>>,
    closed: RwLock<HashSet<SessionId>>,
    save_lock: Mutex<()>,
    transcript_lines: usize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("catalog_path", &self.catalog_path)
            .field("sessions", &self.sessions.read().map(|s| s.len()).unwrap_or(0))
            .finish()
    }
}

impl Gateway {
    /// A gateway over `catalog`. With a `catalog_path`, learned changes are
    /// saved there after every step that changed the catalog.
    pub fn new(catalog: Catalog, catalog_path: Option<PathBuf>, world: WorldConfig, runtime: TaskRuntime) -> Self {
        let store = Arc::new(ContextStore::new());
        let bus = Arc::new(Bus::new());
        let b = bus.clone();
        store.add_listener(move |session, event| b.publish_event(session, event));
        Self {
            catalog: SharedCatalog::new(catalog),
            catalog_path,
            runtime,
            backends: RwLock::new(HashMap::new()),
            world,
            store,
            bus,
            sessions: RwLock::new(HashMap::new()),
            closed: RwLock::new(HashSet::new()),
            save_lock: Mutex::new(()),
            transcript_lines: DEFAULT_TRANSCRIPT_LINES,
        }
    }

    /// Opens the catalog at `path`, creating it from the seed when missing.
    pub fn open(path: impl Into<PathBuf>, world: WorldConfig, runtime: TaskRuntime) -> Result<Self, GatewayError> {
        let path = path.into();
        let catalog = if path.exists() {
            Catalog::load(&path)?
        } else {
            let mut seed = Catalog::seed();
            seed.save(&path)?;
            seed
        };
        Ok(Self::new(catalog, Some(path), world, runtime))
    }

    pub fn with_transcript_lines(mut self, lines: usize) -> Self {
        self.transcript_lines = lines;
        self
    }

    pub fn register_backend(&self, name: &str, backend: Arc<dyn CompletionBackend>) {
        self.backends.write().unwrap().insert(name.to_string(), backend);
    }

    pub fn backend_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.backends.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn catalog(&self) -> &SharedCatalog {
        &self.catalog
    }

    pub fn catalog_path(&self) -> Option<&PathBuf> {
        self.catalog_path.as_ref()
    }

    pub fn store(&self) -> &ContextStore {
        &self.store
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn runtime(&self) -> &TaskRuntime {
        &self.runtime
    }

    pub fn default_world(&self) -> &WorldConfig {
        &self.world
    }

    /// Canonical JSON of the catalog, as written to the catalog file.
    pub fn catalog_snapshot(&self) -> String {
        self.catalog.read(|c| c.to_canonical_json())
    }

    pub fn save_catalog(&self) -> Result<(), GatewayError> {
        let Some(path) = &self.catalog_path else {
            return Ok(());
        };
        let _guard = self.save_lock.lock().unwrap();
        self.catalog.update(|c| c.save(path))?;
        Ok(())
    }

    pub fn create_session(
        &self,
        mode: KeeperMode,
        world: Option<WorldConfig>,
        backend: &str,
    ) -> Result<SessionInfo, GatewayError> {
        let backend = self
            .backends
            .read()
            .unwrap()
            .get(backend)
            .cloned()
            .ok_or_else(|| GatewayError::BackendUnavailable(backend.to_string()))?;
        let world_config = world.unwrap_or_else(|| self.world.clone());
        world_config.validate().map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        let id = SessionId::random();
        self.store.create_session(id.clone())?;
        let session = SessionRuntime {
            id: id.clone(),
            mode,
            status: SessionStatus::Quiescent,
            world_config,
            world: WorldState::new(),
            backend,
            instance: None,
            finished: Vec::new(),
            asked_history: Vec::new(),
            awaiting: Awaiting::Senior,
        };
        let info = session.info();
        self.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
        info!(session = %id, ?mode, "session created");
        Ok(info)
    }

    fn session(&self, id: &SessionId) -> Result<Arc<Mutex<SessionRuntime>>, GatewayError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownSession(id.clone()))
    }

    pub fn session_info(&self, id: &SessionId) -> Result<SessionInfo, GatewayError> {
        Ok(self.session(id)?.lock().unwrap().info())
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    pub fn events(&self, id: &SessionId, from_seq: u64) -> Result<Vec<ContextEvent>, GatewayError> {
        self.session(id)?;
        Ok(self.store.events(id, from_seq)?)
    }

    /// Closes the session; open event streams end after the history.
    pub fn close_session(&self, id: &SessionId) -> Result<(), GatewayError> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        if s.status != SessionStatus::Closed {
            s.status = SessionStatus::Closed;
            s.awaiting = Awaiting::Nothing;
            self.closed.write().unwrap().insert(id.clone());
            self.bus.publish(BusMessage {
                topic: topic::SESSION_CLOSED.to_string(),
                session: id.clone(),
                payload: String::new(),
            });
        }
        Ok(())
    }

    /// Records the utterance and runs the session until nothing is pending.
    /// Returns every event appended during the step.
    pub fn post_utterance(&self, id: &SessionId, actor: Actor, text: &str) -> Result<Vec<ContextEvent>, GatewayError> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        match (s.status, actor, s.mode) {
            (SessionStatus::Closed, _, _) => return Err(GatewayError::SessionClosed(id.clone())),
            (_, Actor::Senior, _) | (_, Actor::Keeper, KeeperMode::HumanKeeper) => {}
            (_, Actor::Keeper, KeeperMode::ScriptedKeeper) => {
                return Err(GatewayError::ActorNotAllowed {
                    actor,
                    reason: "the simulated keeper speaks in this session".into(),
                })
            }
            _ => {
                return Err(GatewayError::ActorNotAllowed {
                    actor,
                    reason: "only the senior and the keeper post utterances".into(),
                })
            }
        }
        let first = self.store.last_seq(id)? + 1;
        self.store.append(id, actor, EventKind::Heard, payload([("text", text)]))?;
        s.status = SessionStatus::Active;
        let stepped = self.step(&mut s, actor, text);
        s.status = SessionStatus::Quiescent;
        s.awaiting = match &s.instance {
            Some(inst) => match inst.awaiting() {
                Some(Actor::Keeper) => Awaiting::Keeper,
                _ => Awaiting::Senior,
            },
            None if stepped.as_ref().is_ok_and(|done| *done) => Awaiting::Nothing,
            None => Awaiting::Senior,
        };
        drop(s);
        stepped?;
        if self.catalog.read(Catalog::is_dirty) {
            self.save_catalog()?;
        }
        Ok(self.store.events(id, first)?)
    }

    /// Returns whether a task reached a terminal state during the step.
    fn step(&self, s: &mut SessionRuntime, actor: Actor, text: &str) -> Result<bool, GatewayError> {
        let id = s.id.clone();
        let backend = s.backend.clone();
        let mut journal = SessionJournal::new(&self.store, &id, self.transcript_lines);
        let mut ctx = StepContext {
            catalog: &self.catalog,
            backend: &*backend,
            journal: &mut journal,
        };
        let mut queue: VecDeque<Effect> = VecDeque::new();
        match (&mut s.instance, actor) {
            (Some(inst), _) => {
                let event = EngineEvent::UtteranceArrived {
                    actor,
                    text: text.to_string(),
                };
                queue.extend(self.runtime.advance(inst, event, &mut ctx)?);
            }
            (None, Actor::Senior) => {
                let catalog = self.catalog.snapshot();
                let transcript = ctx.journal.transcript();
                let heard = ctx.journal.heard_transcript();
                let lang = self.runtime.language();
                let detected = lang.detect_intent_grounded(text, &catalog, &transcript, &heard, None, ctx.backend)?;
                let dispatched = match detected {
                    Interpretation::IntentDetected {
                        intent_name,
                        slot_fills,
                        dropped,
                    } => {
                        match self.runtime.dispatch(&intent_name, slot_fills, &dropped, &id, &mut ctx) {
                            Ok(inst) => Some(inst),
                            Err(TaskError::NoBinding(_) | TaskError::UnknownTask(_)) => None,
                            Err(e) => return Err(e.into()),
                        }
                    }
                    _ => None,
                };
                match dispatched {
                    Some(inst) => {
                        s.asked_history.clear();
                        let inst = s.instance.insert(inst);
                        queue.extend(self.runtime.start(inst, &mut ctx)?);
                    }
                    None => {
                        ctx.journal.record(
                            Actor::Robot,
                            EventKind::Said,
                            payload([("text", UNKNOWN_REQUEST_REPLY), ("to", "senior")]),
                        )?;
                    }
                }
            }
            (None, _) => {}
        }

        let mut processed = 0;
        let mut finished = false;
        while let Some(effect) = queue.pop_front() {
            processed += 1;
            if processed > MAX_EFFECTS_PER_STEP {
                return Err(GatewayError::Runaway(MAX_EFFECTS_PER_STEP));
            }
            let Some(inst) = s.instance.as_mut() else {
                break;
            };
            match effect {
                Effect::Perform { action } => {
                    let done = apply_action(&s.world_config, &mut s.world, &action)?;
                    ctx.journal.record(
                        Actor::Robot,
                        EventKind::ActionPerformed,
                        payload([
                            ("action", action.label()),
                            ("text", describe(&action)),
                            ("tick", done.tick.to_string()),
                            ("location", s.world.robot_location.clone()),
                        ]),
                    )?;
                    queue.extend(self.runtime.advance(inst, EngineEvent::ActionFinished { action }, &mut ctx)?);
                }
                Effect::Speak { to: Actor::Keeper, .. } if s.mode == KeeperMode::ScriptedKeeper => {
                    let reply = keeper_reply(&inst.keeper_request(), &s.world_config, &s.asked_history)?;
                    if let Some(asked) = reply.asked {
                        s.asked_history.push(asked);
                    }
                    ctx.journal
                        .record(Actor::Keeper, EventKind::Heard, payload([("text", reply.text.as_str())]))?;
                    let event = EngineEvent::UtteranceArrived {
                        actor: Actor::Keeper,
                        text: reply.text,
                    };
                    queue.extend(self.runtime.advance(inst, event, &mut ctx)?);
                }
                Effect::Completed | Effect::Failed { .. } => {}
                Effect::Speak { .. } | Effect::Learned { .. } | Effect::Ignored => {}
            }
            if inst.is_terminal() {
                finished = true;
                let done = s.instance.take().expect("instance present");
                if done.state != crate::runtime::state::DONE {
                    warn!(instance = %done.id, state = %done.state, "task ended without delivery");
                }
                s.finished.push(done);
                s.asked_history.clear();
            }
        }
        if let Some(inst) = s.instance.take_if(|i| i.is_terminal()) {
            finished = true;
            s.finished.push(inst);
        }
        Ok(finished)
    }

    /// Events with `seq >= from_seq`, then live events as they are appended.
    /// The stream ends after the history once the session is closed.
    pub fn stream_events(&self, id: &SessionId, from_seq: u64) -> Result<EventStream, GatewayError> {
        self.session(id)?;
        // Subscribe before reading history so nothing falls in between.
        let rx = self
            .bus
            .subscribe(Some(&[topic::EVENTS, topic::SESSION_CLOSED]), Some(id));
        let history = self.store.events(id, from_seq)?;
        let closed = self.closed.read().unwrap().contains(id);
        Ok(EventStream {
            history: history.into(),
            rx,
            next_seq: from_seq.max(1),
            ended: false,
            closed,
        })
    }
}

fn describe(action: &RobotAction) -> String {
    match action {
        RobotAction::NavigateTo { location } => format!("navigate to {location}"),
        RobotAction::PickUp { item, attrs } if attrs.is_empty() => format!("pick up {item}"),
        RobotAction::PickUp { item, attrs } => {
            let details: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("pick up {item} ({})", details.join(", "))
        }
        RobotAction::Deliver => "deliver".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamItem {
    Event(ContextEvent),
    End,
}

/// Ordered event stream of one session. Resuming from the last seen seq
/// loses nothing.
pub struct EventStream {
    history: VecDeque<ContextEvent>,
    rx: Receiver<BusMessage>,
    next_seq: u64,
    ended: bool,
    closed: bool,
}

impl EventStream {
    fn accept(&mut self, event: ContextEvent) -> Option<StreamItem> {
        if event.seq < self.next_seq {
            return None;
        }
        self.next_seq = event.seq + 1;
        Some(StreamItem::Event(event))
    }

    /// Waits up to `timeout` for the next item. `None` means nothing arrived.
    pub fn next_timeout(&mut self, timeout: Duration) -> Option<StreamItem> {
        if self.ended {
            return None;
        }
        while let Some(event) = self.history.pop_front() {
            if let Some(item) = self.accept(event) {
                return Some(item);
            }
        }
        if self.closed {
            self.ended = true;
            return Some(StreamItem::End);
        }
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(msg) if msg.topic == topic::SESSION_CLOSED => {
                    self.ended = true;
                    return Some(StreamItem::End);
                }
                Ok(msg) => {
                    if let Some(item) = msg.event().and_then(|e| self.accept(e)) {
                        return Some(item);
                    }
                }
                Err(RecvTimeoutError::Timeout) => return None,
                Err(RecvTimeoutError::Disconnected) => {
                    self.ended = true;
                    return Some(StreamItem::End);
                }
            }
        }
    }

    /// Everything available without waiting.
    pub fn drain(&mut self) -> Vec<StreamItem> {
        let mut items = Vec::new();
        while let Some(item) = self.next_timeout(Duration::ZERO) {
            let end = item == StreamItem::End;
            items.push(item);
            if end {
                break;
            }
        }
        items
    }
}

impl Iterator for EventStream {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        loop {
            if self.ended {
                return None;
            }
            if let Some(item) = self.next_timeout(Duration::from_secs(3600)) {
                return Some(item);
            }
        }
    }
}

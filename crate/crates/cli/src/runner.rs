use std::path::{Path, PathBuf};

use carebot_core::catalog::Catalog;
use carebot_core::context::{Actor, ContextEvent, SessionId};
use carebot_core::gateway::{GatewayError, KeeperMode};
use carebot_core::Gateway;
use tempfile::TempDir;
use tracing::info;

use crate::client::{ClientError, HttpClient};
use crate::scenario::{evaluate, LoggedEvent, Report, Scenario, Step};
use crate::setup::{build_gateway, write_seed, EngineOptions, SetupError};

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    /// The script asked for something the engine refuses; exit code 2.
    #[error("{0}")]
    Script(String),
    #[error("{0}")]
    Failed(String),
}

impl From<GatewayError> for StepError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::ActorNotAllowed { .. } | GatewayError::BackendUnavailable(_) | GatewayError::InvalidConfig(_) => {
                StepError::Script(e.to_string())
            }
            other => StepError::Failed(other.to_string()),
        }
    }
}

impl From<ClientError> for StepError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { status, .. } if status == 400 || status == 403 => StepError::Script(e.to_string()),
            other => StepError::Failed(other.to_string()),
        }
    }
}

/// Something that can play a scenario: the in-process engine or a remote service.
pub trait Driver {
    fn post(&mut self, actor: Actor, text: &str) -> Result<Vec<ContextEvent>, StepError>;
    fn restart(&mut self) -> Result<(), StepError>;
    fn catalog_json(&mut self) -> Result<String, StepError>;

    /// Events from `from_seq` on, used to keep what a failed step logged.
    fn events_since(&mut self, _from_seq: u64) -> Vec<ContextEvent> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Catalog file to use and keep; a temporary seeded copy otherwise.
    pub catalog: Option<PathBuf>,
    /// Seed copied into the temporary catalog.
    pub seed_catalog: Option<PathBuf>,
    /// Rule file used when the scenario names none.
    pub rules: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
}

pub struct InProcess {
    opts: EngineOptions,
    backend: String,
    keeper: KeeperMode,
    gateway: Gateway,
    session: SessionId,
    _tmp: Option<TempDir>,
}

impl InProcess {
    pub fn start(scenario: &Scenario, run: &RunOptions) -> Result<Self, SetupError> {
        let seed = run.seed_catalog.as_deref().or(scenario.seed_catalog.as_deref());
        let (catalog, tmp) = match &run.catalog {
            Some(path) => {
                if !path.exists() {
                    write_seed(seed, path)?;
                }
                (path.clone(), None)
            }
            None => {
                let dir = tempfile::tempdir().map_err(|e| SetupError::new("temporary directory", e))?;
                let path = dir.path().join("catalog.json");
                write_seed(seed, &path)?;
                (path, Some(dir))
            }
        };
        let opts = EngineOptions {
            catalog,
            world: scenario.world.clone(),
            rules: scenario.rules.clone().or_else(|| run.rules.clone()),
            tasks: run.tasks.clone(),
        };
        let gateway = build_gateway(&opts)?;
        let session = open_session(&gateway, scenario.keeper, &scenario.backend)?;
        Ok(Self {
            opts,
            backend: scenario.backend.clone(),
            keeper: scenario.keeper,
            gateway,
            session,
            _tmp: tmp,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn session(&self) -> &SessionId {
        &self.session
    }

    pub fn catalog_path(&self) -> &Path {
        &self.opts.catalog
    }
}

fn open_session(gw: &Gateway, keeper: KeeperMode, backend: &str) -> Result<SessionId, SetupError> {
    gw.create_session(keeper, None, backend)
        .map(|info| info.id)
        .map_err(|e| SetupError::new("create session", e))
}

impl Driver for InProcess {
    fn post(&mut self, actor: Actor, text: &str) -> Result<Vec<ContextEvent>, StepError> {
        Ok(self.gateway.post_utterance(&self.session, actor, text)?)
    }

    fn restart(&mut self) -> Result<(), StepError> {
        self.gateway.save_catalog()?;
        let gateway = build_gateway(&self.opts).map_err(|e| StepError::Script(e.to_string()))?;
        self.session = open_session(&gateway, self.keeper, &self.backend).map_err(|e| StepError::Script(e.to_string()))?;
        self.gateway = gateway;
        info!(catalog = %self.opts.catalog.display(), "engine restarted");
        Ok(())
    }

    fn catalog_json(&mut self) -> Result<String, StepError> {
        Ok(self.gateway.catalog_snapshot())
    }

    fn events_since(&mut self, from_seq: u64) -> Vec<ContextEvent> {
        self.gateway.events(&self.session, from_seq).unwrap_or_default()
    }
}

/// Plays a scenario against a running service.
pub struct Remote {
    client: HttpClient,
    session: String,
}

impl Remote {
    pub fn connect(url: &str, scenario: &Scenario) -> Result<Self, SetupError> {
        if scenario.steps.iter().any(|s| matches!(s, Step::Restart { .. })) {
            return Err(SetupError("restart steps need an in-process run".into()));
        }
        let client = HttpClient::new(url).map_err(|e| SetupError::new(url, e))?;
        // The service resolves the path itself, from its own working directory.
        let world = scenario
            .world
            .canonicalize()
            .map_err(|e| SetupError::new(scenario.world.display(), e))?;
        let session = client
            .create_session(scenario.keeper, &scenario.backend, Some(&world))
            .map_err(|e| SetupError::new(url, e))?;
        Ok(Self { client, session })
    }
}

impl Driver for Remote {
    fn post(&mut self, actor: Actor, text: &str) -> Result<Vec<ContextEvent>, StepError> {
        Ok(self.client.post_utterance(&self.session, actor, text)?)
    }

    fn restart(&mut self) -> Result<(), StepError> {
        Err(StepError::Script("restart steps need an in-process run".into()))
    }

    fn catalog_json(&mut self) -> Result<String, StepError> {
        Ok(self.client.catalog()?)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub log: Vec<LoggedEvent>,
    pub catalog: Catalog,
}

/// Posts every step, then checks the expectations against the log and the
/// final catalog. Refused steps are script errors.
pub fn run_scenario(scenario: &Scenario, driver: &mut dyn Driver) -> Result<Outcome, SetupError> {
    let mut log: Vec<LoggedEvent> = Vec::new();
    let mut session = 1;
    let mut error = None;
    for (i, step) in scenario.steps.iter().enumerate() {
        let next_seq = log
            .iter()
            .rev()
            .find(|l| l.session == session)
            .map_or(1, |l| l.event.seq + 1);
        let result = match step {
            Step::Utterance { actor, text } => driver.post(*actor, text).map(|events| {
                log.extend(events.into_iter().map(|event| LoggedEvent { session, event }));
            }),
            Step::Restart { .. } => driver.restart().map(|()| session += 1),
        };
        match result {
            Ok(()) => {}
            Err(StepError::Script(m)) => return Err(SetupError(format!("step {}: {m}", i + 1))),
            Err(StepError::Failed(m)) => {
                let partial = driver.events_since(next_seq);
                log.extend(partial.into_iter().map(|event| LoggedEvent { session, event }));
                error = Some(format!("step {}: {m}", i + 1));
                break;
            }
        }
    }
    let json = driver
        .catalog_json()
        .map_err(|e| SetupError::new("read catalog", e))?;
    let catalog = Catalog::from_json(&json).map_err(|e| SetupError::new("read catalog", e))?;
    let results = scenario
        .expectations
        .iter()
        .map(|exp| evaluate(exp, &log, &catalog))
        .collect();
    Ok(Outcome {
        report: Report {
            scenario: scenario.name.clone(),
            results,
            error,
        },
        log,
        catalog,
    })
}

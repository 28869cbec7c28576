use std::path::{Path, PathBuf};
use std::sync::Arc;

use carebot_core::catalog::Catalog;
use carebot_core::llm::{RemoteBackend, RemoteConfig, ScriptedBackend};
use carebot_core::runtime::{TaskRegistry, TaskRuntime};
use carebot_core::world::WorldConfig;
use carebot_core::Gateway;
use thiserror::Error;
use tracing::debug;

pub const SCRIPTED: &str = "scripted";
pub const REMOTE: &str = "remote";

/// Problems with configuration files or flags. The CLI exits with code 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct SetupError(pub String);

impl SetupError {
    pub fn new(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        Self(format!("{context}: {err}"))
    }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub catalog: PathBuf,
    pub world: PathBuf,
    pub rules: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
}

pub fn load_world(path: &Path) -> Result<WorldConfig, SetupError> {
    WorldConfig::load(path).map_err(|e| SetupError::new(path.display(), e))
}

pub fn runtime(tasks: Option<&Path>) -> Result<TaskRuntime, SetupError> {
    let mut registry = TaskRegistry::with_builtin();
    if let Some(path) = tasks {
        registry
            .load_file(path)
            .map_err(|e| SetupError::new(path.display(), e))?;
    }
    Ok(TaskRuntime::new(registry))
}

/// Gateway over the catalog file (seeded when missing) with the scripted
/// backend when rules are given and the remote backend when its env vars are set.
pub fn build_gateway(opts: &EngineOptions) -> Result<Gateway, SetupError> {
    let world = load_world(&opts.world)?;
    let gw = Gateway::open(&opts.catalog, world, runtime(opts.tasks.as_deref())?)
        .map_err(|e| SetupError::new(opts.catalog.display(), e))?;
    if let Some(rules) = &opts.rules {
        let backend = ScriptedBackend::from_path(rules).map_err(|e| SetupError::new(rules.display(), e))?;
        gw.register_backend(SCRIPTED, Arc::new(backend));
    }
    match RemoteConfig::from_env().and_then(RemoteBackend::new) {
        Ok(remote) => gw.register_backend(REMOTE, Arc::new(remote)),
        Err(e) => debug!(error = %e, "remote backend not configured"),
    }
    Ok(gw)
}

/// Copies `seed` (or the built-in seed) to `dest`.
pub fn write_seed(seed: Option<&Path>, dest: &Path) -> Result<(), SetupError> {
    let mut catalog = match seed {
        Some(path) => Catalog::load(path).map_err(|e| SetupError::new(path.display(), e))?,
        None => Catalog::seed(),
    };
    catalog.save(dest).map_err(|e| SetupError::new(dest.display(), e))
}

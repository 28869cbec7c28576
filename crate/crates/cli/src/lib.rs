//! Operator tooling around the carebot engine: scenario runs, log replay,
//! catalog dumps and the HTTP service.

pub mod client;
pub mod runner;
pub mod scenario;
pub mod server;
pub mod setup;

use std::io::BufReader;
use std::path::Path;

use carebot_core::catalog::Catalog;
use carebot_core::context::{import_ndjson, render_transcript};

/// Transcript of an exported NDJSON event log.
pub fn replay(path: &Path) -> Result<String, String> {
    let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let events = import_ndjson(BufReader::new(file)).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(render_transcript(&events, usize::MAX))
}

/// Canonical JSON of a catalog file, validated on the way.
pub fn dump_catalog_file(path: &Path) -> Result<String, String> {
    Catalog::load(path)
        .map(|c| c.to_canonical_json())
        .map_err(|e| e.to_string())
}

//! Scripted dialogues with expectations over the resulting event log and catalog.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use carebot_core::catalog::{fold_options, normalize_name, Catalog};
use carebot_core::context::{Actor, ContextEvent, EventKind};
use carebot_core::gateway::KeeperMode;
use serde::{Deserialize, Serialize};

use crate::setup::SetupError;

pub const SCENARIO_SUFFIX: &str = ".scenario.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Step {
    Utterance { actor: Actor, text: String },
    /// Saves the catalog, starts a fresh engine on it and opens a new session.
    Restart { restart: bool },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EventKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<Actor>,
    /// Exact `text` payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Case-insensitive substring of the primary text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
    /// Session number within the run, counting from 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<usize>,
}

impl Matcher {
    pub fn matches(&self, e: &LoggedEvent) -> bool {
        self.session.is_none_or(|s| s == e.session)
            && self.kind.is_none_or(|k| k == e.event.kind)
            && self.actor.is_none_or(|a| a == e.event.actor)
            && self.text.as_deref().is_none_or(|t| e.event.text() == Some(t))
            && self.contains.as_deref().is_none_or(|c| {
                e.event
                    .primary_text()
                    .to_lowercase()
                    .contains(&c.to_lowercase())
            })
            && self.payload.iter().all(|(k, v)| e.event.get(k) == Some(v.as_str()))
    }

    fn is_empty(&self) -> bool {
        self.kind.is_none()
            && self.actor.is_none()
            && self.text.is_none()
            && self.contains.is_none()
            && self.payload.is_empty()
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(a) = self.actor {
            parts.push(format!("[{a}]"));
        }
        parts.push(self.kind.map_or("*".to_string(), |k| k.to_string()));
        if let Some(t) = &self.text {
            parts.push(format!("{t:?}"));
        }
        if let Some(c) = &self.contains {
            parts.push(format!("~{c:?}"));
        }
        for (k, v) in &self.payload {
            parts.push(format!("{k}={v}"));
        }
        if let Some(s) = self.session {
            parts.push(format!("(session {s})"));
        }
        f.write_str(&parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogExpectation {
    pub intent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    /// Exact option set of the slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl fmt::Display for CatalogExpectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "catalog has {}", self.intent)?;
        if let Some(s) = &self.slot {
            write!(f, ".{s}")?;
        }
        if let Some(o) = &self.options {
            write!(f, " = {{{}}}", o.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Event(Matcher),
    Absent(Matcher),
    /// Matching events occur in this order, not necessarily adjacent.
    Sequence(Vec<Matcher>),
    /// The first event matches before any event matching the second.
    Before([Matcher; 2]),
    Catalog(CatalogExpectation),
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Event(m) => write!(f, "event {m}"),
            Expectation::Absent(m) => write!(f, "no event {m}"),
            Expectation::Sequence(ms) => {
                let parts: Vec<String> = ms.iter().map(ToString::to_string).collect();
                write!(f, "sequence {}", parts.join(" -> "))
            }
            Expectation::Before([a, b]) => write!(f, "{a} before {b}"),
            Expectation::Catalog(c) => c.fmt(f),
        }
    }
}

fn default_backend() -> String {
    "scripted".to_string()
}

fn default_keeper() -> KeeperMode {
    KeeperMode::ScriptedKeeper
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    pub world: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_catalog: Option<PathBuf>,
    #[serde(default = "default_keeper")]
    pub keeper: KeeperMode,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
}

/// `path`, or `path` with the scenario suffix when that exists.
pub fn resolve_script(path: &Path) -> PathBuf {
    if path.is_file() {
        return path.to_path_buf();
    }
    let mut with_suffix = path.as_os_str().to_owned();
    with_suffix.push(SCENARIO_SUFFIX);
    let candidate = PathBuf::from(with_suffix);
    if candidate.is_file() {
        candidate
    } else {
        path.to_path_buf()
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SetupError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SetupError::new("invalid scenario", e))?;
        s.validate()?;
        Ok(s)
    }

    /// Loads a script; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, SetupError> {
        let path = resolve_script(path);
        let text = std::fs::read_to_string(&path).map_err(|e| SetupError::new(path.display(), e))?;
        let mut s = Self::from_json(&text).map_err(|e| SetupError::new(path.display(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut s.world);
        if let Some(r) = s.rules.as_mut() {
            fix(r);
        }
        if let Some(c) = s.seed_catalog.as_mut() {
            fix(c);
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SetupError> {
        let invalid = |m: String| Err(SetupError(format!("scenario `{}`: {m}", self.name)));
        if !self.steps.iter().any(|s| matches!(s, Step::Utterance { .. })) {
            return invalid("steps must contain at least one utterance".into());
        }
        if matches!(self.steps.first(), Some(Step::Restart { .. })) {
            return invalid("the first step cannot be a restart".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                Step::Utterance { actor, text } => {
                    if !matches!(actor, Actor::Senior | Actor::Keeper) {
                        return invalid(format!("step {}: only senior and keeper speak", i + 1));
                    }
                    if *actor == Actor::Keeper && self.keeper == KeeperMode::ScriptedKeeper {
                        return invalid(format!("step {}: the keeper is simulated in this scenario", i + 1));
                    }
                    if text.trim().is_empty() {
                        return invalid(format!("step {}: empty utterance", i + 1));
                    }
                }
                Step::Restart { restart } => {
                    if !restart {
                        return invalid(format!("step {}: `restart` must be true", i + 1));
                    }
                }
            }
        }
        let sessions = 1 + self.steps.iter().filter(|s| matches!(s, Step::Restart { .. })).count();
        for (i, exp) in self.expectations.iter().enumerate() {
            let matchers: Vec<&Matcher> = match exp {
                Expectation::Event(m) | Expectation::Absent(m) => vec![m],
                Expectation::Sequence(ms) => ms.iter().collect(),
                Expectation::Before(ms) => ms.iter().collect(),
                Expectation::Catalog(c) => {
                    if c.intent.trim().is_empty() {
                        return invalid(format!("expectation {}: empty intent", i + 1));
                    }
                    if c.options.is_some() && c.slot.is_none() {
                        return invalid(format!("expectation {}: options need a slot", i + 1));
                    }
                    Vec::new()
                }
            };
            if matches!(exp, Expectation::Sequence(ms) if ms.is_empty()) {
                return invalid(format!("expectation {}: empty sequence", i + 1));
            }
            for m in matchers {
                if m.is_empty() {
                    return invalid(format!("expectation {}: matcher has no criteria", i + 1));
                }
                if m.session.is_some_and(|s| s == 0 || s > sessions) {
                    return invalid(format!("expectation {}: no session {}", i + 1, m.session.unwrap()));
                }
            }
        }
        Ok(())
    }
}

/// An event and the run-local number of the session it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub session: usize,
    pub event: ContextEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub description: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

pub fn evaluate(exp: &Expectation, log: &[LoggedEvent], catalog: &Catalog) -> ExpectationResult {
    let description = exp.to_string();
    let find = |m: &Matcher, from: usize| log[from..].iter().position(|e| m.matches(e)).map(|p| p + from);
    let (passed, detail) = match exp {
        Expectation::Event(m) => match find(m, 0) {
            Some(_) => (true, String::new()),
            None => (false, "no matching event".to_string()),
        },
        Expectation::Absent(m) => match find(m, 0) {
            None => (true, String::new()),
            Some(i) => (false, format!("found {}", log[i].event.transcript_line())),
        },
        Expectation::Sequence(ms) => {
            let mut from = 0;
            let mut failed = None;
            for (n, m) in ms.iter().enumerate() {
                match find(m, from) {
                    Some(i) => from = i + 1,
                    None => {
                        failed = Some(format!("element {} ({m}) not found after position {from}", n + 1));
                        break;
                    }
                }
            }
            match failed {
                None => (true, String::new()),
                Some(d) => (false, d),
            }
        }
        Expectation::Before([a, b]) => match (find(a, 0), find(b, 0)) {
            (None, _) => (false, format!("no event {a}")),
            (Some(i), Some(j)) if j < i => (false, format!("{} came first", log[j].event.transcript_line())),
            _ => (true, String::new()),
        },
        Expectation::Catalog(c) => check_catalog(c, catalog),
    };
    ExpectationResult {
        description,
        passed,
        detail,
    }
}

fn check_catalog(c: &CatalogExpectation, catalog: &Catalog) -> (bool, String) {
    let Some(intent) = catalog.intent(&normalize_name(&c.intent)) else {
        return (false, format!("no intent `{}`", c.intent));
    };
    let Some(slot_name) = &c.slot else {
        return (true, String::new());
    };
    let Some(slot) = intent.slot(&normalize_name(slot_name)) else {
        return (false, format!("`{}` has no slot `{slot_name}`", intent.name));
    };
    match &c.options {
        Some(want) => {
            let mut want = fold_options(want);
            let mut have = slot.options.clone();
            want.sort();
            have.sort();
            if want == have {
                (true, String::new())
            } else {
                (false, format!("options are {{{}}}", slot.options.join(", ")))
            }
        }
        None => (true, String::new()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub results: Vec<ExpectationResult>,
    /// Set when the dialogue itself could not be completed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.results.iter().all(|r| r.passed)
    }

    pub fn first_failure(&self) -> Option<&ExpectationResult> {
        self.results.iter().find(|r| !r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario {}\n", self.scenario));
        if let Some(e) = &self.error {
            out.push_str(&format!("ERROR {e}\n"));
        }
        for r in &self.results {
            let mark = if r.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{mark} {}", r.description));
            if !r.detail.is_empty() {
                out.push_str(&format!(": {}", r.detail));
            }
            out.push('\n');
        }
        let passed = self.results.iter().filter(|r| r.passed).count();
        let verdict = if self.passed() { "passed" } else { "failed" };
        out.push_str(&format!("{verdict}: {passed}/{} expectations\n", self.results.len()));
        out
    }
}

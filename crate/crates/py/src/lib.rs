//! Python bindings: the catalog, the gateway driven by the scripted backend,
//! and the envelope and grounding helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use carebot_core::catalog::{CatalogError, BRING_GOODS_TASK};
use carebot_core::context::ContextEvent;
use carebot_core::llm::{grounding_filter, parse_envelope as parse, ScriptedBackend};
use carebot_core::runtime::TaskRuntime;
use carebot_core::{Actor, Catalog, Gateway, IntentSpec, KeeperMode, SessionId, SlotSpec, WorldConfig};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn catalog_error(e: CatalogError) -> PyErr {
    match e {
        CatalogError::UnknownIntent(_) | CatalogError::UnknownSlot { .. } | CatalogError::NoBinding(_) => {
            PyKeyError::new_err(e.to_string())
        }
        other => value_error(other),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn event_to_py<'py>(py: Python<'py>, e: &ContextEvent) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("seq", e.seq)?;
    dict.set_item("wall_time", e.wall_time)?;
    dict.set_item("actor", e.actor.as_str())?;
    dict.set_item("kind", e.kind.as_str())?;
    dict.set_item("payload", e.payload.clone())?;
    dict.set_item("line", e.transcript_line())?;
    Ok(dict)
}

fn events_to_py<'py>(py: Python<'py>, events: &[ContextEvent]) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty(py);
    for e in events {
        list.append(event_to_py(py, e)?)?;
    }
    Ok(list)
}

/// The intent catalog: intents, their slots and slot options.
#[pyclass(name = "Catalog", module = "carebot", skip_from_py_object)]
#[derive(Clone)]
struct PyCatalog {
    inner: Catalog,
}

#[pymethods]
impl PyCatalog {
    /// The starting catalog with the generic `bring_goods(item)` intent.
    #[staticmethod]
    fn seed() -> Self {
        Self { inner: Catalog::seed() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Catalog::load(path).map(|inner| Self { inner }).map_err(catalog_error)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Catalog::from_json(text).map(|inner| Self { inner }).map_err(catalog_error)
    }

    /// Canonical JSON, byte-stable across save and load.
    fn to_json(&self) -> String {
        self.inner.to_canonical_json()
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(catalog_error)
    }

    /// Intent names in creation order.
    fn intents(&self) -> Vec<String> {
        self.inner.list_intents().iter().map(|i| i.name.clone()).collect()
    }

    /// `[(slot, [options])]` of an intent.
    fn slots(&self, intent: &str) -> PyResult<Vec<(String, Vec<String>)>> {
        let spec = self
            .inner
            .intent(intent)
            .ok_or_else(|| PyKeyError::new_err(intent.to_string()))?;
        Ok(spec.slots.iter().map(|s| (s.name.clone(), s.options.clone())).collect())
    }

    #[pyo3(signature = (name, slots = Vec::new(), description = ""))]
    fn register_intent(&mut self, name: &str, slots: Vec<(String, Vec<String>)>, description: &str) -> PyResult<u64> {
        let spec = slots.iter().fold(IntentSpec::learned(name, description), |spec, (slot, options)| {
            spec.with_slot(SlotSpec::new(slot, "").with_options(options))
        });
        self.inner
            .register_intent(spec, BRING_GOODS_TASK, &[BRING_GOODS_TASK])
            .map_err(catalog_error)
    }

    #[pyo3(signature = (intent, slot, options = Vec::new()))]
    fn add_slot(&mut self, intent: &str, slot: &str, options: Vec<String>) -> PyResult<()> {
        self.inner
            .add_slot(intent, SlotSpec::new(slot, "").with_options(options))
            .map(|_| ())
            .map_err(catalog_error)
    }

    fn set_slot_options(&mut self, intent: &str, slot: &str, options: Vec<String>) -> PyResult<Vec<String>> {
        self.inner
            .set_slot_options(intent, slot, options)
            .map(|s| s.options.clone())
            .map_err(catalog_error)
    }

    fn resolve_task(&self, intent: &str) -> PyResult<String> {
        self.inner.resolve_task(intent).map(str::to_string).map_err(catalog_error)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Catalog({})", self.intents().join(", "))
    }
}

/// The dialogue engine with one scripted backend registered as `scripted`.
#[pyclass(name = "Engine", module = "carebot")]
struct PyEngine {
    gw: Gateway,
}

fn actor(name: &str) -> PyResult<Actor> {
    serde_json::from_value(Value::String(name.to_string())).map_err(|_| value_error(format!("unknown actor `{name}`")))
}

#[pymethods]
impl PyEngine {
    /// `catalog` may be a file path (created from the seed when missing and
    /// saved after learning) or a `Catalog` kept in memory.
    #[new]
    #[pyo3(signature = (world, rules, catalog = None))]
    fn new(world: PathBuf, rules: PathBuf, catalog: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let world = WorldConfig::load(world).map_err(value_error)?;
        let runtime = TaskRuntime::default();
        let gw = match catalog {
            None => Gateway::new(Catalog::seed(), None, world, runtime),
            Some(obj) => match obj.cast::<PyCatalog>() {
                Ok(c) => Gateway::new(c.borrow().inner.clone(), None, world, runtime),
                Err(_) => {
                    let path: PathBuf = obj.extract()?;
                    Gateway::open(path, world, runtime).map_err(value_error)?
                }
            },
        };
        let backend = ScriptedBackend::from_path(rules).map_err(value_error)?;
        gw.register_backend("scripted", Arc::new(backend));
        Ok(Self { gw })
    }

    /// Opens a session and returns its id. `keeper` is `scripted` or `human`.
    #[pyo3(signature = (keeper = "scripted"))]
    fn create_session(&self, keeper: &str) -> PyResult<String> {
        let mode: KeeperMode = keeper.parse().map_err(value_error)?;
        let info = self.gw.create_session(mode, None, "scripted").map_err(value_error)?;
        Ok(info.id.to_string())
    }

    /// Posts an utterance and returns the events it caused.
    fn post_utterance<'py>(&self, py: Python<'py>, session: &str, actor_name: &str, text: &str) -> PyResult<Bound<'py, PyList>> {
        let who = actor(actor_name)?;
        let id = SessionId::from(session);
        let events = py
            .detach(|| self.gw.post_utterance(&id, who, text))
            .map_err(value_error)?;
        events_to_py(py, &events)
    }

    #[pyo3(signature = (session, from_seq = 1))]
    fn events<'py>(&self, py: Python<'py>, session: &str, from_seq: u64) -> PyResult<Bound<'py, PyList>> {
        let events = self.gw.events(&SessionId::from(session), from_seq).map_err(value_error)?;
        events_to_py(py, &events)
    }

    fn transcript(&self, session: &str) -> PyResult<String> {
        let events = self.gw.events(&SessionId::from(session), 1).map_err(value_error)?;
        Ok(events.iter().map(ContextEvent::transcript_line).collect::<Vec<_>>().join("\n"))
    }

    /// Who the session waits for: `senior`, `keeper` or `nothing`.
    fn awaiting(&self, session: &str) -> PyResult<String> {
        let info = self.gw.session_info(&SessionId::from(session)).map_err(value_error)?;
        match serde_json::to_value(info.awaiting).map_err(value_error)? {
            Value::String(s) => Ok(s),
            other => Ok(other.to_string()),
        }
    }

    fn close_session(&self, session: &str) -> PyResult<()> {
        self.gw.close_session(&SessionId::from(session)).map_err(value_error)
    }

    fn catalog(&self) -> PyCatalog {
        PyCatalog {
            inner: self.gw.catalog().snapshot(),
        }
    }
}

/// The first JSON object in a completion, as a dict.
#[pyfunction]
fn parse_envelope<'py>(py: Python<'py>, completion: &str) -> PyResult<Bound<'py, PyAny>> {
    let map = parse(completion).map_err(value_error)?;
    json_to_py(py, &Value::Object(map))
}

/// Splits `fills` into those grounded in `transcript` and the dropped ones,
/// as `(kept, [(slot, value, reason)])`.
type Dropped = Vec<(String, String, String)>;

#[pyfunction]
fn ground(
    catalog: &PyCatalog,
    intent: &str,
    fills: BTreeMap<String, String>,
    transcript: &str,
) -> PyResult<(BTreeMap<String, String>, Dropped)> {
    let spec = catalog
        .inner
        .intent(intent)
        .ok_or_else(|| PyKeyError::new_err(intent.to_string()))?;
    let grounded = grounding_filter(&fills, spec, transcript);
    let dropped = grounded
        .dropped
        .into_iter()
        .map(|d| (d.slot, d.value, d.reason.as_str().to_string()))
        .collect();
    Ok((grounded.kept, dropped))
}

#[pymodule]
fn carebot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(parse_envelope, m)?)?;
    m.add_function(wrap_pyfunction!(ground, m)?)?;
    Ok(())
}

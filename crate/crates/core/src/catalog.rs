//! Intent catalog: the knowledge base of intents, their slots and the
//! intent → task bindings. It only ever grows.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Task every learned item-specific intent is bound to.
pub const BRING_GOODS_TASK: &str = "bring_goods_task";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("intent `{0}` already exists")]
    DuplicateIntent(String),
    #[error("task `{0}` is not registered")]
    UnknownTask(String),
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error("intent `{intent}` has no slot `{slot}`")]
    UnknownSlot { intent: String, slot: String },
    #[error("no task bound to intent `{0}`")]
    NoBinding(String),
    #[error("invalid name `{0}`")]
    InvalidName(String),
    #[error("catalog i/o on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt catalog: {0}")]
    CorruptCatalog(String),
}

/// Lowercase, trim, and turn inner whitespace runs into `_`.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

pub fn is_normalized(name: &str) -> bool {
    !name.is_empty() && normalize_name(name) == name
}

/// Case-folds and de-duplicates option values, keeping first-seen order.
pub fn fold_options<I, S>(options: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for opt in options {
        let folded = opt.as_ref().trim().to_lowercase();
        if !folded.is_empty() && !out.contains(&folded) {
            out.push(folded);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Allowed values; empty means unconstrained.
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default = "default_required")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarifying_question: Option<String>,
}

fn default_required() -> bool {
    true
}

impl SlotSpec {
    pub fn new(name: &str, description: &str) -> Self {
        Self {
            name: normalize_name(name),
            description: description.to_string(),
            options: Vec::new(),
            required: true,
            clarifying_question: None,
        }
    }

    pub fn with_options<I, S>(mut self, options: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.options = fold_options(options);
        self
    }

    pub fn with_question(mut self, question: &str) -> Self {
        self.clarifying_question = Some(question.to_string());
        self
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }

    /// Returns the stored spelling of `value` if it is allowed.
    pub fn canonical_option(&self, value: &str) -> Option<&str> {
        let folded = value.trim().to_lowercase();
        self.options
            .iter()
            .find(|o| **o == folded)
            .map(String::as_str)
    }

    pub fn accepts(&self, value: &str) -> bool {
        self.options.is_empty() || self.canonical_option(value).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seeded,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub slots: Vec<SlotSpec>,
    pub origin: Origin,
    /// Assigned by the catalog on registration.
    #[serde(default)]
    pub created_at: u64,
}

impl IntentSpec {
    pub fn learned(name: &str, description: &str) -> Self {
        Self {
            name: normalize_name(name),
            description: description.to_string(),
            slots: Vec::new(),
            origin: Origin::Learned,
            created_at: 0,
        }
    }

    pub fn seeded(name: &str, description: &str) -> Self {
        Self {
            origin: Origin::Seeded,
            ..Self::learned(name, description)
        }
    }

    pub fn with_slot(mut self, slot: SlotSpec) -> Self {
        self.slots.push(slot);
        self
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        let name = normalize_name(name);
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.slot(name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBinding {
    pub intent_name: String,
    pub task_name: String,
}

/// Something that knows which task names exist.
pub trait TaskDirectory {
    fn contains_task(&self, name: &str) -> bool;
}

impl TaskDirectory for [&str] {
    fn contains_task(&self, name: &str) -> bool {
        self.contains(&name)
    }
}

impl<const N: usize> TaskDirectory for [&str; N] {
    fn contains_task(&self, name: &str) -> bool {
        self.contains(&name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogDocument {
    schema_version: u32,
    intents: Vec<IntentSpec>,
    bindings: Vec<TaskBinding>,
    next_seq: u64,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    intents: BTreeMap<String, IntentSpec>,
    bindings: BTreeMap<String, TaskBinding>,
    next_seq: u64,
    dirty: bool,
}

impl Default for Catalog {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.intents == other.intents
            && self.bindings == other.bindings
            && self.next_seq == other.next_seq
    }
}

impl Catalog {
    pub fn new() -> Self {
        Self {
            intents: BTreeMap::new(),
            bindings: BTreeMap::new(),
            next_seq: 1,
            dirty: false,
        }
    }

    /// The starting catalog: one generic `bring_goods(item)` intent.
    pub fn seed() -> Self {
        let mut c = Self::new();
        c.register_intent(
            IntentSpec::seeded("bring_goods", "bring an item to the senior")
                .with_slot(SlotSpec::new("item", "the item to bring")),
            BRING_GOODS_TASK,
            &[BRING_GOODS_TASK],
        )
        .expect("seed intent is valid");
        c.dirty = false;
        c
    }

    pub fn schema_version(&self) -> u32 {
        SCHEMA_VERSION
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn len(&self) -> usize {
        self.intents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }

    /// All intents ordered by creation, then name.
    pub fn list_intents(&self) -> Vec<&IntentSpec> {
        let mut out: Vec<_> = self.intents.values().collect();
        out.sort_by(|a, b| (a.created_at, &a.name).cmp(&(b.created_at, &b.name)));
        out
    }

    pub fn intent(&self, name: &str) -> Option<&IntentSpec> {
        self.intents.get(&normalize_name(name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.intent(name).is_some()
    }

    pub fn bindings(&self) -> impl Iterator<Item = &TaskBinding> {
        self.bindings.values()
    }

    pub fn register_intent(
        &mut self,
        mut spec: IntentSpec,
        binding_task: &str,
        tasks: &(impl TaskDirectory + ?Sized),
    ) -> Result<u64, CatalogError> {
        spec.name = normalize_name(&spec.name);
        if spec.name.is_empty() {
            return Err(CatalogError::InvalidName(spec.name));
        }
        if self.intents.contains_key(&spec.name) {
            return Err(CatalogError::DuplicateIntent(spec.name));
        }
        if !tasks.contains_task(binding_task) {
            return Err(CatalogError::UnknownTask(binding_task.to_string()));
        }
        let mut slots: Vec<SlotSpec> = Vec::with_capacity(spec.slots.len());
        for slot in spec.slots.drain(..) {
            merge_slot(&mut slots, slot)?;
        }
        spec.slots = slots;

        let seq = self.next_seq;
        spec.created_at = seq;
        self.next_seq += 1;
        self.bindings.insert(
            spec.name.clone(),
            TaskBinding {
                intent_name: spec.name.clone(),
                task_name: binding_task.to_string(),
            },
        );
        self.intents.insert(spec.name.clone(), spec);
        self.dirty = true;
        Ok(seq)
    }

    /// Appends a slot, or merges it into an existing slot of the same name.
    pub fn add_slot(&mut self, intent_name: &str, slot: SlotSpec) -> Result<&IntentSpec, CatalogError> {
        let key = normalize_name(intent_name);
        let intent = self
            .intents
            .get_mut(&key)
            .ok_or_else(|| CatalogError::UnknownIntent(key.clone()))?;
        let before = intent.slots.clone();
        merge_slot(&mut intent.slots, slot)?;
        if intent.slots != before {
            self.dirty = true;
        }
        Ok(&self.intents[&key])
    }

    pub fn set_slot_options<I, S>(
        &mut self,
        intent_name: &str,
        slot_name: &str,
        options: I,
    ) -> Result<&SlotSpec, CatalogError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let key = normalize_name(intent_name);
        let slot_key = normalize_name(slot_name);
        let intent = self
            .intents
            .get_mut(&key)
            .ok_or_else(|| CatalogError::UnknownIntent(key.clone()))?;
        let idx = intent
            .slots
            .iter()
            .position(|s| s.name == slot_key)
            .ok_or_else(|| CatalogError::UnknownSlot {
                intent: key.clone(),
                slot: slot_key.clone(),
            })?;
        let folded = fold_options(options);
        if intent.slots[idx].options != folded {
            intent.slots[idx].options = folded;
            self.dirty = true;
        }
        Ok(&self.intents[&key].slots[idx])
    }

    pub fn resolve_task(&self, intent_name: &str) -> Result<&str, CatalogError> {
        let key = normalize_name(intent_name);
        self.bindings
            .get(&key)
            .map(|b| b.task_name.as_str())
            .ok_or(CatalogError::NoBinding(key))
    }

    /// Canonical document: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let doc = CatalogDocument {
            schema_version: SCHEMA_VERSION,
            intents: self.list_intents().into_iter().cloned().collect(),
            bindings: self.bindings.values().cloned().collect(),
            next_seq: self.next_seq,
        };
        // serde_json::Value maps are BTreeMaps, so keys come out sorted.
        let value = serde_json::to_value(&doc).expect("catalog serializes");
        let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let doc: CatalogDocument =
            serde_json::from_str(text).map_err(|e| CatalogError::CorruptCatalog(e.to_string()))?;
        Self::from_document(doc)
    }

    fn from_document(doc: CatalogDocument) -> Result<Self, CatalogError> {
        let corrupt = |msg: String| Err(CatalogError::CorruptCatalog(msg));
        if doc.schema_version != SCHEMA_VERSION {
            return corrupt(format!("unsupported schema_version {}", doc.schema_version));
        }
        let mut intents = BTreeMap::new();
        for intent in doc.intents {
            if !is_normalized(&intent.name) {
                return corrupt(format!("intent name `{}` is not normalized", intent.name));
            }
            if intent.created_at >= doc.next_seq {
                return corrupt(format!(
                    "intent `{}` created_at {} is not below next_seq {}",
                    intent.name, intent.created_at, doc.next_seq
                ));
            }
            let mut seen: Vec<&str> = Vec::new();
            for slot in &intent.slots {
                if !is_normalized(&slot.name) {
                    return corrupt(format!("slot name `{}` is not normalized", slot.name));
                }
                if seen.contains(&slot.name.as_str()) {
                    return corrupt(format!("duplicate slot `{}` on `{}`", slot.name, intent.name));
                }
                seen.push(&slot.name);
                if fold_options(&slot.options) != slot.options {
                    return corrupt(format!("options of `{}.{}` are not folded", intent.name, slot.name));
                }
            }
            let name = intent.name.clone();
            if intents.insert(name.clone(), intent).is_some() {
                return corrupt(format!("duplicate intent `{name}`"));
            }
        }
        let mut bindings = BTreeMap::new();
        for binding in doc.bindings {
            if !intents.contains_key(&binding.intent_name) {
                return corrupt(format!("binding for unknown intent `{}`", binding.intent_name));
            }
            let key = binding.intent_name.clone();
            if bindings.insert(key.clone(), binding).is_some() {
                return corrupt(format!("duplicate binding for `{key}`"));
            }
        }
        Ok(Self {
            intents,
            bindings,
            next_seq: doc.next_seq,
            dirty: false,
        })
    }

    /// Writes to a temp file next to `path` and renames it into place.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<(), CatalogError> {
        let path = path.as_ref();
        let io = |source| CatalogError::IoFailure {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(self.to_canonical_json().as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        self.dirty = false;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CatalogError::IoFailure {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Replaces this catalog with the file contents; on error `self` is untouched.
    pub fn reload(&mut self, path: impl AsRef<Path>) -> Result<(), CatalogError> {
        *self = Self::load(path)?;
        Ok(())
    }
}

/// The single owner of a catalog shared across sessions. Readers take
/// snapshots; every mutation runs under the write lock.
#[derive(Debug, Clone, Default)]
pub struct SharedCatalog(Arc<RwLock<Catalog>>);

impl SharedCatalog {
    pub fn new(catalog: Catalog) -> Self {
        Self(Arc::new(RwLock::new(catalog)))
    }

    pub fn snapshot(&self) -> Catalog {
        self.0.read().unwrap().clone()
    }

    pub fn read<R>(&self, f: impl FnOnce(&Catalog) -> R) -> R {
        f(&self.0.read().unwrap())
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut Catalog) -> R) -> R {
        f(&mut self.0.write().unwrap())
    }
}

fn merge_slot(slots: &mut Vec<SlotSpec>, mut slot: SlotSpec) -> Result<(), CatalogError> {
    slot.name = normalize_name(&slot.name);
    if slot.name.is_empty() {
        return Err(CatalogError::InvalidName(slot.name));
    }
    slot.options = fold_options(&slot.options);
    match slots.iter_mut().find(|s| s.name == slot.name) {
        Some(existing) => {
            let merged = fold_options(existing.options.iter().chain(slot.options.iter()));
            existing.options = merged;
            if existing.clarifying_question.is_none() {
                existing.clarifying_question = slot.clarifying_question;
            }
        }
        None => slots.push(slot),
    }
    Ok(())
}

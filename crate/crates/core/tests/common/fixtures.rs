//! Engines and backends for the harder flows: a backend that injects an
//! ungrounded slot fill, and an intent with six required slots.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use carebot_core::catalog::BRING_GOODS_TASK;
use carebot_core::context::EventKind;
use carebot_core::llm::{parse_envelope, BackendError, CompletionBackend};
use carebot_core::runtime::TaskRuntime;
use carebot_core::world::Dimension;
use carebot_core::{Actor, Catalog, ContextEvent, Gateway, IntentSpec, KeeperMode, SlotSpec, WorldConfig};
use serde_json::{json, Value};

use super::props::{carehome_rules, config_dir};

/// Wraps a backend and adds `slot: value` to every intent envelope it returns.
pub struct InjectingBackend {
    inner: Arc<dyn CompletionBackend>,
    slot: String,
    value: String,
    pub injected: AtomicUsize,
}

impl InjectingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>, slot: &str, value: &str) -> Self {
        Self {
            inner,
            slot: slot.to_string(),
            value: value.to_string(),
            injected: AtomicUsize::new(0),
        }
    }
}

impl CompletionBackend for InjectingBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let out = self.inner.complete(prompt)?;
        let intent_prompt = prompt.starts_with("#template: detect_intent") || prompt.starts_with("#template: fill_slots");
        let Ok(mut map) = parse_envelope(&out) else {
            return Ok(out);
        };
        if !intent_prompt || map.get("intent").and_then(Value::as_str) == Some("unknown") {
            return Ok(out);
        }
        let slots = map.entry("slots").or_insert_with(|| json!({}));
        if let Some(slots) = slots.as_object_mut() {
            slots.insert(self.slot.clone(), json!(self.value));
            self.injected.fetch_add(1, Ordering::SeqCst);
        }
        Ok(Value::Object(map).to_string())
    }

    fn identity(&self) -> &str {
        "injecting"
    }
}

/// The tea catalog as learned from the keeper.
pub fn learned_tea() -> Catalog {
    let mut c = Catalog::seed();
    let tea = IntentSpec::learned("bring_tea", "bring tea")
        .with_slot(SlotSpec::new("blackOrGreen", "black or green tea").with_options(["black", "green"]))
        .with_slot(SlotSpec::new("sugar", "with sugar").with_options(["yes", "no"]))
        .with_slot(SlotSpec::new("lemon", "with lemon").with_options(["yes", "no"]));
    c.register_intent(tea, BRING_GOODS_TASK, &[BRING_GOODS_TASK]).unwrap();
    c
}

pub fn world() -> WorldConfig {
    WorldConfig::load(config_dir().join("carehome.json")).unwrap()
}

pub const SANDWICH_SLOTS: [(&str, [&str; 2]); 6] = [
    ("bread", ["white", "brown"]),
    ("filling", ["cheese", "ham"]),
    ("sauce", ["mustard", "mayo"]),
    ("size", ["small", "large"]),
    ("toasting", ["toasted", "plain"]),
    ("cut", ["halves", "quarters"]),
];

/// Catalog and world with `bring_sandwich`, six required slots with options.
pub fn sandwich_gateway(max_round_trips: u32) -> Gateway {
    let mut catalog = Catalog::seed();
    let spec = SANDWICH_SLOTS.iter().fold(IntentSpec::learned("bring_sandwich", "bring a sandwich"), |spec, (slot, opts)| {
        spec.with_slot(SlotSpec::new(slot, slot).with_options(opts.iter()))
    });
    catalog.register_intent(spec, BRING_GOODS_TASK, &[BRING_GOODS_TASK]).unwrap();
    let mut world = world();
    world.items.insert(
        "sandwich".to_string(),
        SANDWICH_SLOTS
            .iter()
            .map(|(slot, opts)| Dimension {
                name: slot.to_string(),
                values: opts.iter().map(|o| o.to_string()).collect(),
                question: None,
            })
            .collect(),
    );
    let gw = Gateway::new(catalog, None, world, TaskRuntime::default().with_max_round_trips(max_round_trips));
    gw.register_backend("scripted", carehome_rules());
    gw
}

/// Answers every question of the robot with the first option it lists, for
/// up to `limit` turns. Returns the whole log.
pub fn answer_until_done(gw: &Gateway, opening: &str, limit: usize) -> Vec<ContextEvent> {
    let s = gw.create_session(KeeperMode::ScriptedKeeper, None, "scripted").unwrap().id;
    let mut events = gw.post_utterance(&s, Actor::Senior, opening).unwrap();
    for _ in 0..limit {
        let Some(question) = events
            .iter()
            .rev()
            .find(|e| e.kind == EventKind::Said && e.get("to") == Some("senior"))
        else {
            break;
        };
        if gw.session_info(&s).unwrap().task.is_none() {
            break;
        }
        let text = question.primary_text();
        let answer = SANDWICH_SLOTS
            .iter()
            .flat_map(|(_, opts)| opts.iter())
            .find(|o| text.contains(*o))
            .map(|o| format!("{o}, please"))
            .unwrap_or_else(|| "I don't mind".to_string());
        events = gw.post_utterance(&s, Actor::Senior, &answer).unwrap();
    }
    gw.events(&s, 1).unwrap()
}

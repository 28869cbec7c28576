//! Property suites shared by the core tests and the acceptance run. Each
//! returns `Err` with the shrunk counterexample on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use carebot_core::catalog::{normalize_name, BRING_GOODS_TASK};
use carebot_core::llm::{parse_envelope, CompletionBackend, ScriptedBackend};
use carebot_core::runtime::TaskRuntime;
use carebot_core::{Actor, Catalog, ContextStore, Gateway, IntentSpec, KeeperMode, SessionId, SlotSpec, WorldConfig};
use carebot_core::context::{payload, EventKind};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub fn config_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

// Catalog operations ---------------------------------------------------------

#[derive(Debug, Clone)]
pub enum CatalogOp {
    Register { name: String, slots: Vec<(String, Vec<String>)> },
    AddSlot { intent: String, slot: String, options: Vec<String> },
    SetOptions { intent: String, slot: String, options: Vec<String> },
    RoundTrip,
}

/// Names drawn from a small pool, in varying case and spacing, so that
/// collisions after normalization are common.
fn name() -> impl Strategy<Value = String> {
    (
        prop::sample::select(vec!["bring juice", "bring_tea", "BRING_coffee", "bring goods", "fetch  Water", "bring_Cake"]),
        any::<bool>(),
    )
        .prop_map(|(n, upper)| if upper { n.to_uppercase() } else { n.to_string() })
}

fn slot_name() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["which", "blackOrGreen", "BlackOrGreen", "sugar", "Lemon", "type", " size "])
        .prop_map(str::to_string)
}

fn options() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["apple", "Apple", "orange", "black", "GREEN", "yes", "no", " no "]),
        0..4,
    )
    .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

pub fn catalog_op() -> impl Strategy<Value = CatalogOp> {
    prop_oneof![
        3 => (name(), prop::collection::vec((slot_name(), options()), 0..3))
            .prop_map(|(name, slots)| CatalogOp::Register { name, slots }),
        4 => (name(), slot_name(), options()).prop_map(|(intent, slot, options)| CatalogOp::AddSlot { intent, slot, options }),
        2 => (name(), slot_name(), options()).prop_map(|(intent, slot, options)| CatalogOp::SetOptions { intent, slot, options }),
        1 => Just(CatalogOp::RoundTrip),
    ]
}

type Slots = Vec<(String, Vec<String>)>;
type IntentView = BTreeMap<String, (u64, Slots)>;

/// Independent model: intent -> ordered slots -> ordered, folded options.
#[derive(Debug, Default)]
struct Model {
    intents: IntentView,
    next_seq: u64,
}

fn fold(values: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        let v = v.trim().to_lowercase();
        if !v.is_empty() && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn key(raw: &str) -> String {
    raw.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join("_")
}

impl Model {
    fn merge(slots: &mut Slots, slot: &str, options: &[String]) {
        let slot = key(slot);
        match slots.iter_mut().find(|(n, _)| *n == slot) {
            Some((_, existing)) => {
                let mut all = existing.clone();
                all.extend(fold(options));
                *existing = fold(&all);
            }
            None => slots.push((slot, fold(options))),
        }
    }

    fn apply(&mut self, op: &CatalogOp) -> bool {
        match op {
            CatalogOp::Register { name, slots } => {
                let k = key(name);
                if self.intents.contains_key(&k) {
                    return false;
                }
                let mut merged = Vec::new();
                for (s, o) in slots {
                    Self::merge(&mut merged, s, o);
                }
                self.intents.insert(k, (self.next_seq, merged));
                self.next_seq += 1;
                true
            }
            CatalogOp::AddSlot { intent, slot, options } => match self.intents.get_mut(&key(intent)) {
                Some((_, slots)) => {
                    Self::merge(slots, slot, options);
                    true
                }
                None => false,
            },
            CatalogOp::SetOptions { intent, slot, options } => {
                let Some((_, slots)) = self.intents.get_mut(&key(intent)) else {
                    return false;
                };
                match slots.iter_mut().find(|(n, _)| *n == key(slot)) {
                    Some((_, existing)) => {
                        *existing = fold(options);
                        true
                    }
                    None => false,
                }
            }
            CatalogOp::RoundTrip => true,
        }
    }
}

fn view(c: &Catalog) -> IntentView {
    c.list_intents()
        .into_iter()
        .map(|i| {
            let slots = i.slots.iter().map(|s| (s.name.clone(), s.options.clone())).collect();
            (i.name.clone(), (i.created_at, slots))
        })
        .collect()
}

fn check_ops(ops: &[CatalogOp]) -> Result<(), TestCaseError> {
    let mut catalog = Catalog::new();
    let mut model = Model {
        next_seq: 1,
        ..Model::default()
    };
    let mut last_seq = catalog.next_seq();
    let mut known: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for op in ops {
        let expected_ok = model.apply(op);
        let ok = match op {
            CatalogOp::Register { name, slots } => {
                let spec = slots.iter().fold(IntentSpec::learned(name, ""), |spec, (s, o)| {
                    spec.with_slot(SlotSpec::new(s, "").with_options(o.iter()))
                });
                catalog.register_intent(spec, BRING_GOODS_TASK, &[BRING_GOODS_TASK]).is_ok()
            }
            CatalogOp::AddSlot { intent, slot, options } => catalog
                .add_slot(intent, SlotSpec::new(slot, "").with_options(options.iter()))
                .is_ok(),
            CatalogOp::SetOptions { intent, slot, options } => catalog.set_slot_options(intent, slot, options).is_ok(),
            CatalogOp::RoundTrip => {
                let json = catalog.to_canonical_json();
                let back = Catalog::from_json(&json).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(&back, &catalog);
                prop_assert_eq!(back.to_canonical_json(), json);
                catalog = back;
                true
            }
        };
        prop_assert_eq!(ok, expected_ok, "op {:?}", op);
        prop_assert_eq!(&view(&catalog), &model.intents);

        // Uniqueness: normalized, distinct intent and slot names.
        let mut names = BTreeSet::new();
        for intent in catalog.list_intents() {
            prop_assert_eq!(&normalize_name(&intent.name), &intent.name);
            prop_assert!(names.insert(intent.name.clone()));
            let slots: BTreeSet<_> = intent.slots.iter().map(|s| s.name.as_str()).collect();
            prop_assert_eq!(slots.len(), intent.slots.len());
            prop_assert_eq!(catalog.resolve_task(&intent.name).ok(), Some(BRING_GOODS_TASK));
        }
        // Monotonicity: the sequence never goes back, nothing is forgotten.
        prop_assert!(catalog.next_seq() >= last_seq);
        last_seq = catalog.next_seq();
        for (intent, slots) in &known {
            let spec = catalog.intent(intent);
            prop_assert!(spec.is_some(), "intent {} vanished", intent);
            for s in slots {
                prop_assert!(spec.unwrap().has_slot(s), "slot {}.{} vanished", intent, s);
            }
        }
        known = catalog
            .list_intents()
            .into_iter()
            .map(|i| (i.name.clone(), i.slots.iter().map(|s| s.name.clone()).collect()))
            .collect();
        let created: Vec<u64> = catalog.list_intents().iter().map(|i| i.created_at).collect();
        prop_assert!(created.windows(2).all(|w| w[0] < w[1]));
    }
    Ok(())
}

pub fn catalog_ops(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&prop::collection::vec(catalog_op(), 1..40), |ops| check_ops(&ops))
        .map_err(|e| e.to_string())
}

// Envelope parser -------------------------------------------------------------

fn completion() -> impl Strategy<Value = String> {
    prop_oneof![
        any::<String>(),
        "[{}\\[\\]\":,a-z0-9\\\\ ]{0,64}",
        ("[^{]{0,16}", "[{}\":a-z\\\\]{0,24}", "[{}\"\\]]{0,8}").prop_map(|(a, b, c)| format!("{a}{{\"k\":{b}{c}")),
        prop::collection::vec(prop::sample::select(vec!["{", "}", "\"", "\\", "[", "]", ":", ",", "1", "x", " "]), 0..80)
            .prop_map(|v| v.concat()),
    ]
}

pub fn envelope_fuzz(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&completion(), |text| {
            let result = std::panic::catch_unwind(|| parse_envelope(&text));
            prop_assert!(result.is_ok(), "parser panicked on {:?}", text);
            if let Ok(Ok(map)) = result {
                // Whatever is returned must be a genuine object from the input.
                let back = serde_json::to_string(&map).unwrap();
                prop_assert!(serde_json::from_str::<serde_json::Value>(&back).unwrap().is_object());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

// Context store ---------------------------------------------------------------

pub fn seq_contiguity(cases: u32) -> Result<(), String> {
    let appends = prop::collection::vec((0usize..4, 0usize..3), 1..120);
    runner(cases)
        .run(&appends, |appends| {
            let store = Arc::new(ContextStore::new());
            let seen: Arc<Mutex<BTreeMap<SessionId, Vec<u64>>>> = Arc::default();
            let sink = seen.clone();
            store.add_listener(move |s, e| sink.lock().unwrap().entry(s.clone()).or_default().push(e.seq));
            let ids: Vec<SessionId> = (0..4).map(|i| SessionId::from(format!("s{i}").as_str())).collect();
            for id in &ids {
                store.create_session(id.clone()).unwrap();
            }
            // Appends spread over threads, several per session.
            let handles: Vec<_> = (0..3)
                .map(|t| {
                    let store = store.clone();
                    let ids = ids.clone();
                    let mine: Vec<usize> = appends.iter().filter(|(_, th)| *th == t).map(|(s, _)| *s).collect();
                    std::thread::spawn(move || {
                        for s in mine {
                            store
                                .append(&ids[s], Actor::Senior, EventKind::Heard, payload([("text", "hello")]))
                                .unwrap();
                        }
                    })
                })
                .collect();
            for h in handles {
                h.join().unwrap();
            }
            let seen = seen.lock().unwrap();
            for (i, id) in ids.iter().enumerate() {
                let n = appends.iter().filter(|(s, _)| *s == i).count() as u64;
                let seqs: Vec<u64> = store.events(id, 1).unwrap().iter().map(|e| e.seq).collect();
                prop_assert_eq!(&seqs, &(1..=n).collect::<Vec<_>>());
                prop_assert_eq!(store.last_seq(id).unwrap(), n);
                let observed = seen.get(id).cloned().unwrap_or_default();
                prop_assert_eq!(observed, seqs);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

// Determinism -----------------------------------------------------------------

fn utterances() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec![
            "Bring me a juice, please.",
            "Apple juice",
            "Orange juice",
            "Bring me a tea.",
            "Green, please.",
            "Black.",
            "Yes, please.",
            "No, thanks.",
            "Bring me a coffee.",
            "Bring me a green coffee.",
            "Black is fine.",
            "Could you fetch some water?",
            "Sing me a song.",
        ]),
        1..12,
    )
    .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

pub fn scripted_gateway(catalog: Catalog, backend: Arc<dyn CompletionBackend>) -> Gateway {
    let world = WorldConfig::load(config_dir().join("carehome.json")).expect("world config");
    let gw = Gateway::new(catalog, None, world, TaskRuntime::default());
    gw.register_backend("scripted", backend);
    gw
}

pub fn carehome_rules() -> Arc<dyn CompletionBackend> {
    Arc::new(ScriptedBackend::from_path(config_dir().join("carehome.rules.json")).expect("rules"))
}

/// Event log and final catalog of one run; failed steps are logged as text.
pub fn play(lines: &[String]) -> (Vec<String>, String) {
    let gw = scripted_gateway(Catalog::seed(), carehome_rules());
    let s = gw.create_session(KeeperMode::ScriptedKeeper, None, "scripted").unwrap().id;
    let mut outcomes = Vec::new();
    for line in lines {
        if let Err(e) = gw.post_utterance(&s, Actor::Senior, line) {
            outcomes.push(format!("error: {e}"));
        }
    }
    let log = gw
        .events(&s, 1)
        .unwrap()
        .iter()
        .map(|e| serde_json::to_string(&e.without_wall_time()).unwrap())
        .chain(outcomes)
        .collect();
    (log, gw.catalog_snapshot())
}

pub fn determinism(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&utterances(), |lines| {
            let first = play(&lines);
            let second = play(&lines);
            prop_assert_eq!(first, second);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

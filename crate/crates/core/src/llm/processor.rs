use serde_json::{Map, Value};
use tracing::{debug, warn};

use super::grounding::{grounding_filter, SlotFills};
use super::template::{
    focus_block, list_fills, list_known_intents, list_slots, render, Bindings, TemplateId, RETRY_SUFFIX,
};
use super::{parse_envelope, CompletionBackend, Interpretation, LlmError, ReplyKind};
use crate::catalog::{fold_options, normalize_name, Catalog, IntentSpec, SlotSpec};

/// The request the robot is currently working on, for slot filling.
#[derive(Debug, Clone, Copy)]
pub struct Focus<'a> {
    pub intent: &'a str,
    pub fills: &'a SlotFills,
    /// Slot the robot just asked about, listed first.
    pub asked_slot: Option<&'a str>,
}

/// Renders prompts, calls a backend and turns completions into
/// [`Interpretation`]s. Holds no per-call state.
#[derive(Debug, Clone)]
pub struct LanguageProcessor {
    retry_malformed: bool,
}

impl Default for LanguageProcessor {
    fn default() -> Self {
        Self { retry_malformed: true }
    }
}

impl LanguageProcessor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn without_retry() -> Self {
        Self { retry_malformed: false }
    }

    /// Renders, completes and parses; one retry on a malformed completion.
    fn call<T>(
        &self,
        id: TemplateId,
        bindings: &Bindings,
        backend: &dyn CompletionBackend,
        parse: impl Fn(&Map<String, Value>) -> Result<T, LlmError>,
    ) -> Result<T, LlmError> {
        let prompt = render(id, bindings)?;
        let first = backend.complete(&prompt)?;
        let err = match parse_envelope(&first).and_then(|m| parse(&m)) {
            Ok(v) => return Ok(v),
            Err(e @ LlmError::MalformedCompletion(_)) if self.retry_malformed => e,
            Err(e) => return Err(e),
        };
        debug!(template = %id, error = %err, "retrying malformed completion");
        let second = backend.complete(&format!("{prompt}{RETRY_SUFFIX}"))?;
        parse_envelope(&second).and_then(|m| parse(&m))
    }

    /// Detects the intent of the latest utterance. With a `focus`, the
    /// utterance is read as an answer that fills the focus intent's slots.
    pub fn detect_intent(
        &self,
        utterance: &str,
        catalog: &Catalog,
        transcript: &str,
        focus: Option<Focus<'_>>,
        backend: &dyn CompletionBackend,
    ) -> Result<Interpretation, LlmError> {
        self.detect_intent_grounded(utterance, catalog, transcript, transcript, focus, backend)
    }

    /// Like [`LanguageProcessor::detect_intent`], but grounds slot fills
    /// against `grounding` instead of the prompt transcript.
    pub fn detect_intent_grounded(
        &self,
        utterance: &str,
        catalog: &Catalog,
        transcript: &str,
        grounding: &str,
        focus: Option<Focus<'_>>,
        backend: &dyn CompletionBackend,
    ) -> Result<Interpretation, LlmError> {
        if utterance.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty utterance".into()));
        }
        let (id, bindings) = match focus {
            None => (
                TemplateId::DetectIntent,
                Bindings::from([
                    ("known_intents", list_known_intents(catalog)),
                    ("interlocutor", "senior".to_string()),
                    ("transcript", transcript.to_string()),
                ]),
            ),
            Some(focus) => {
                let intent = catalog
                    .intent(focus.intent)
                    .ok_or_else(|| LlmError::InvalidRequest(format!("unknown intent `{}`", focus.intent)))?;
                let missing = ordered_missing(intent, focus.fills, focus.asked_slot);
                (
                    TemplateId::FillSlots,
                    Bindings::from([
                        ("focus_intent", focus_block(&[("name", &intent.name), ("description", &intent.description)])),
                        ("missing_slots", list_slots(missing)),
                        ("filled_slots", list_fills(focus.fills)),
                        ("interlocutor", "senior".to_string()),
                        ("transcript", transcript.to_string()),
                    ]),
                )
            }
        };
        let (name, fills) = self.call(id, &bindings, backend, parse_intent_envelope)?;
        let Some(name) = name else {
            return Ok(Interpretation::Unknown);
        };
        let Some(intent) = catalog.intent(&name) else {
            debug!(intent = %name, "completion named an intent outside the catalog");
            return Ok(Interpretation::Unknown);
        };
        let grounded = grounding_filter(&fills, intent, grounding);
        for dropped in &grounded.dropped {
            warn!(slot = %dropped.slot, value = %dropped.value, reason = ?dropped.reason, "dropped slot fill");
        }
        Ok(Interpretation::IntentDetected {
            intent_name: intent.name.clone(),
            slot_fills: grounded.kept,
            dropped: grounded.dropped,
        })
    }

    /// Classifies the keeper's latest reply to the pending request.
    pub fn classify_keeper_reply(
        &self,
        reply: &str,
        intent: &str,
        pending_request: &str,
        fills: &SlotFills,
        transcript: &str,
        backend: &dyn CompletionBackend,
    ) -> Result<Interpretation, LlmError> {
        let bindings = Bindings::from([
            (
                "focus_intent",
                focus_block(&[("name", intent), ("pending_request", pending_request), ("reply", reply)]),
            ),
            ("filled_slots", list_fills(fills)),
            ("interlocutor", "keeper".to_string()),
            ("transcript", transcript.to_string()),
        ]);
        self.call(TemplateId::ClassifyReply, &bindings, backend, |m| {
            let kind = m
                .get("kind")
                .and_then(Value::as_str)
                .and_then(ReplyKind::parse)
                .ok_or_else(|| malformed("`kind` missing or not a reply kind"))?;
            let question = m
                .get("question")
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|q| !q.is_empty())
                .map(str::to_string);
            let question_text = match kind {
                ReplyKind::UnexpectedQuestion => Some(question.unwrap_or_else(|| reply.trim().to_string())),
                _ => question,
            };
            Ok(Interpretation::ReplyClassified { kind, question_text })
        })
    }

    /// Proposes a catalog addition for a keeper question or constraint.
    /// Nothing is applied here.
    #[allow(clippy::too_many_arguments)]
    pub fn derive_addition(
        &self,
        question: &str,
        current_intent: Option<&str>,
        item: &str,
        catalog: &Catalog,
        transcript: &str,
        fills: &SlotFills,
        backend: &dyn CompletionBackend,
    ) -> Result<Interpretation, LlmError> {
        let bindings = Bindings::from([
            ("known_intents", list_known_intents(catalog)),
            (
                "focus_intent",
                focus_block(&[
                    ("name", current_intent.unwrap_or("")),
                    ("item", item),
                    ("question", question.trim()),
                ]),
            ),
            ("filled_slots", list_fills(fills)),
            ("transcript", transcript.to_string()),
        ]);
        self.call(TemplateId::DeriveAddition, &bindings, backend, |m| {
            let intent_name = match m.get("intent").and_then(Value::as_str).map(normalize_name) {
                Some(n) if !n.is_empty() => n,
                _ if !item.trim().is_empty() => normalize_name(&format!("bring {item}")),
                _ => return Err(malformed("`intent` missing")),
            };
            let slot = match m.get("slot") {
                Some(Value::String(name)) => SlotSpec::new(name, ""),
                Some(Value::Object(obj)) => {
                    let name = obj
                        .get("name")
                        .and_then(Value::as_str)
                        .ok_or_else(|| malformed("`slot.name` missing"))?;
                    let description = obj.get("description").and_then(Value::as_str).unwrap_or("");
                    let mut slot = SlotSpec::new(name, description);
                    if let Some(q) = obj.get("question").and_then(Value::as_str) {
                        slot = slot.with_question(q);
                    }
                    slot
                }
                _ => return Err(malformed("`slot` missing")),
            };
            if slot.name.is_empty() {
                return Err(malformed("`slot.name` is empty"));
            }
            let options = match m.get("options") {
                Some(Value::Array(values)) => {
                    let folded = fold_options(values.iter().filter_map(value_text));
                    (!folded.is_empty()).then_some(folded)
                }
                _ => None,
            };
            Ok(Interpretation::AdditionProposed {
                intent_name,
                slot,
                options,
            })
        })
    }

    pub fn generate_clarifying_question(
        &self,
        intent: &IntentSpec,
        missing_slot: &str,
        fills: &SlotFills,
        transcript: &str,
        backend: &dyn CompletionBackend,
    ) -> Result<Interpretation, LlmError> {
        let slot = intent.slot(missing_slot).ok_or_else(|| {
            LlmError::InvalidRequest(format!("`{}` has no slot `{missing_slot}`", intent.name))
        })?;
        if fills.contains_key(&slot.name) {
            return Err(LlmError::InvalidRequest(format!("slot `{}` is already filled", slot.name)));
        }
        if backend.is_scripted() {
            if let Some(q) = slot.clarifying_question.as_deref().filter(|q| !q.trim().is_empty()) {
                return Ok(Interpretation::UtteranceGenerated { text: q.to_string() });
            }
        }
        let missing = ordered_missing(intent, fills, Some(&slot.name));
        let bindings = Bindings::from([
            (
                "focus_intent",
                focus_block(&[("name", &intent.name), ("item", &item_of(&intent.name, fills))]),
            ),
            ("missing_slots", list_slots(missing)),
            ("filled_slots", list_fills(fills)),
            ("interlocutor", "senior".to_string()),
            ("transcript", transcript.to_string()),
        ]);
        self.call(TemplateId::GenClarifyQuestion, &bindings, backend, parse_text)
    }

    /// A request to the keeper; always names the item and each filled value.
    pub fn generate_keeper_request(
        &self,
        intent: &str,
        fills: &SlotFills,
        transcript: &str,
        backend: &dyn CompletionBackend,
    ) -> Result<Interpretation, LlmError> {
        let item = item_of(intent, fills);
        let bindings = Bindings::from([
            ("focus_intent", focus_block(&[("name", intent), ("item", &item)])),
            ("filled_slots", list_fills(fills)),
            ("interlocutor", "keeper".to_string()),
            ("transcript", transcript.to_string()),
        ]);
        let Interpretation::UtteranceGenerated { mut text } =
            self.call(TemplateId::GenKeeperRequest, &bindings, backend, parse_text)?
        else {
            unreachable!("parse_text only yields utterances");
        };
        let lower = text.to_lowercase();
        let mut missing: Vec<String> = Vec::new();
        if !item.is_empty() && !lower.contains(&item.to_lowercase()) {
            missing.push(item.clone());
        }
        for (slot, value) in fills {
            if slot != "item" && !lower.contains(&value.to_lowercase()) {
                missing.push(format!("{slot}: {value}"));
            }
        }
        if !missing.is_empty() {
            text = format!("{} ({})", text.trim_end(), missing.join(", "));
        }
        Ok(Interpretation::UtteranceGenerated { text })
    }
}

/// Item named by the `item` fill, else derived from a `bring_<item>` intent.
pub fn item_of(intent: &str, fills: &SlotFills) -> String {
    if let Some(item) = fills.get("item").filter(|s| !s.is_empty()) {
        return item.clone();
    }
    intent
        .strip_prefix("bring_")
        .filter(|s| *s != "goods")
        .map(|s| s.replace('_', " "))
        .unwrap_or_default()
}

/// Unfilled slots in catalog order, with `first` moved to the front.
fn ordered_missing<'a>(intent: &'a IntentSpec, fills: &SlotFills, first: Option<&str>) -> Vec<&'a SlotSpec> {
    let mut missing: Vec<&SlotSpec> = intent.slots.iter().filter(|s| !fills.contains_key(&s.name)).collect();
    if let Some(first) = first.map(normalize_name) {
        if let Some(pos) = missing.iter().position(|s| s.name == first) {
            let slot = missing.remove(pos);
            missing.insert(0, slot);
        }
    }
    missing
}

fn malformed(msg: &str) -> LlmError {
    LlmError::MalformedCompletion(msg.to_string())
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// `(intent or None for unknown, raw slot fills)`
fn parse_intent_envelope(m: &Map<String, Value>) -> Result<(Option<String>, SlotFills), LlmError> {
    let intent = m
        .get("intent")
        .ok_or_else(|| malformed("`intent` missing"))?;
    let name = match intent {
        Value::Null => None,
        Value::String(s) => {
            let n = normalize_name(s);
            (!n.is_empty() && n != "unknown" && n != "none").then_some(n)
        }
        _ => return Err(malformed("`intent` is not a string")),
    };
    let mut fills = SlotFills::new();
    match m.get("slots") {
        None | Some(Value::Null) => {}
        Some(Value::Object(slots)) => {
            for (k, v) in slots {
                if let Some(text) = value_text(v) {
                    fills.insert(normalize_name(k), text);
                }
            }
        }
        Some(_) => return Err(malformed("`slots` is not an object")),
    }
    Ok((name, fills))
}

fn parse_text(m: &Map<String, Value>) -> Result<Interpretation, LlmError> {
    match m.get("text").and_then(Value::as_str).map(str::trim) {
        Some(t) if !t.is_empty() => Ok(Interpretation::UtteranceGenerated { text: t.to_string() }),
        _ => Err(malformed("`text` missing or empty")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{IntentSpec, SlotSpec, BRING_GOODS_TASK};
    use crate::llm::{BackendError, DropReason, DroppedFill};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Canned {
        replies: Vec<&'static str>,
        calls: AtomicUsize,
        scripted: bool,
    }

    impl Canned {
        fn new(replies: Vec<&'static str>) -> Self {
            Self {
                replies,
                calls: AtomicUsize::new(0),
                scripted: false,
            }
        }
    }

    impl CompletionBackend for Canned {
        fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[n.min(self.replies.len() - 1)].to_string())
        }

        fn identity(&self) -> &str {
            "canned"
        }

        fn is_scripted(&self) -> bool {
            self.scripted
        }
    }

    struct Down;

    impl CompletionBackend for Down {
        fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
            Err(BackendError::Transport("connection refused".into()))
        }

        fn identity(&self) -> &str {
            "down"
        }
    }

    fn catalog() -> Catalog {
        let mut c = Catalog::new();
        c.register_intent(
            IntentSpec::seeded("bring_goods", "").with_slot(SlotSpec::new("item", "")),
            BRING_GOODS_TASK,
            &[BRING_GOODS_TASK],
        )
        .unwrap();
        c.register_intent(
            IntentSpec::learned("bring_juice", "").with_slot(SlotSpec::new("which", "")),
            BRING_GOODS_TASK,
            &[BRING_GOODS_TASK],
        )
        .unwrap();
        c
    }

    #[test]
    fn malformed_completion_is_retried_once() {
        let backend = Canned::new(vec!["hmm", r#"{"intent":"bring_goods","slots":{"item":"juice"}}"#]);
        let got = LanguageProcessor::new()
            .detect_intent("bring me juice", &catalog(), "[senior] Heard: bring me juice", None, &backend)
            .unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(
            got,
            Interpretation::IntentDetected {
                intent_name: "bring_goods".into(),
                slot_fills: SlotFills::from([("item".into(), "juice".into())]),
                dropped: vec![],
            }
        );
    }

    #[test]
    fn second_malformed_surfaces() {
        let backend = Canned::new(vec!["hmm", "still prose"]);
        let err = LanguageProcessor::new()
            .detect_intent("bring me juice", &catalog(), "", None, &backend)
            .unwrap_err();
        assert!(matches!(err, LlmError::MalformedCompletion(_)));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn backend_failure_is_not_retried() {
        let err = LanguageProcessor::new()
            .detect_intent("x", &catalog(), "", None, &Down)
            .unwrap_err();
        assert!(matches!(err, LlmError::BackendFailure(_)));
    }

    #[test]
    fn intents_outside_catalog_are_unknown() {
        let backend = Canned::new(vec![r#"{"intent":"fly_to_moon","slots":{}}"#]);
        let got = LanguageProcessor::new().detect_intent("fly", &catalog(), "fly", None, &backend).unwrap();
        assert_eq!(got, Interpretation::Unknown);
        let backend = Canned::new(vec![r#"{"intent":"unknown"}"#]);
        let got = LanguageProcessor::new().detect_intent("xq", &catalog(), "xq", None, &backend).unwrap();
        assert_eq!(got, Interpretation::Unknown);
    }

    #[test]
    fn focus_fill_is_grounded() {
        let backend = Canned::new(vec![r#"{"intent":"bring_juice","slots":{"which":"Apple","size":"big"}}"#]);
        let fills = SlotFills::new();
        let got = LanguageProcessor::new()
            .detect_intent(
                "Apple juice",
                &catalog(),
                "[senior] Heard: Apple juice",
                Some(Focus { intent: "bring_juice", fills: &fills, asked_slot: Some("which") }),
                &backend,
            )
            .unwrap();
        assert_eq!(
            got,
            Interpretation::IntentDetected {
                intent_name: "bring_juice".into(),
                slot_fills: SlotFills::from([("which".into(), "apple".into())]),
                dropped: vec![DroppedFill {
                    slot: "size".into(),
                    value: "big".into(),
                    reason: DropReason::UnknownSlot,
                }],
            }
        );
    }

    #[test]
    fn unexpected_question_keeps_reply_text() {
        let backend = Canned::new(vec![r#"{"kind":"unexpected_question"}"#]);
        let got = LanguageProcessor::new()
            .classify_keeper_reply("Which juice?", "bring_goods", "juice please", &SlotFills::new(), "", &backend)
            .unwrap();
        assert_eq!(
            got,
            Interpretation::ReplyClassified {
                kind: ReplyKind::UnexpectedQuestion,
                question_text: Some("Which juice?".into())
            }
        );
    }

    #[test]
    fn derive_defaults_to_item_intent() {
        let backend = Canned::new(vec![r#"{"slot":{"name":"Which"}}"#]);
        let got = LanguageProcessor::new()
            .derive_addition("Which juice?", Some("bring_goods"), "juice", &catalog(), "", &SlotFills::new(), &backend)
            .unwrap();
        match got {
            Interpretation::AdditionProposed { intent_name, slot, options } => {
                assert_eq!(intent_name, "bring_juice");
                assert_eq!(slot.name, "which");
                assert!(slot.required);
                assert_eq!(options, None);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canned_question_is_used_verbatim_when_scripted() {
        let intent = IntentSpec::learned("bring_juice", "")
            .with_slot(SlotSpec::new("which", "").with_question("Apple or orange?"));
        let mut backend = Canned::new(vec![r#"{"text":"generated"}"#]);
        backend.scripted = true;
        let got = LanguageProcessor::new()
            .generate_clarifying_question(&intent, "which", &SlotFills::new(), "", &backend)
            .unwrap();
        assert_eq!(got, Interpretation::UtteranceGenerated { text: "Apple or orange?".into() });
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn keeper_request_names_every_value() {
        let backend = Canned::new(vec![r#"{"text":"Could I have a drink?"}"#]);
        let fills = SlotFills::from([("which".into(), "apple".into())]);
        let Interpretation::UtteranceGenerated { text } = LanguageProcessor::new()
            .generate_keeper_request("bring_juice", &fills, "", &backend)
            .unwrap()
        else {
            panic!()
        };
        assert!(text.contains("juice") && text.contains("apple"), "{text}");
    }

    #[test]
    fn item_derivation() {
        assert_eq!(item_of("bring_juice", &SlotFills::new()), "juice");
        assert_eq!(item_of("bring_goods", &SlotFills::new()), "");
        let fills = SlotFills::from([("item".into(), "tea".into())]);
        assert_eq!(item_of("bring_goods", &fills), "tea");
    }
}

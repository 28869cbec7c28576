//! The six prompt templates and their rendering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::catalog::{Catalog, IntentSpec, SlotSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    DetectIntent,
    FillSlots,
    ClassifyReply,
    DeriveAddition,
    GenClarifyQuestion,
    GenKeeperRequest,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::DetectIntent,
        TemplateId::FillSlots,
        TemplateId::ClassifyReply,
        TemplateId::DeriveAddition,
        TemplateId::GenClarifyQuestion,
        TemplateId::GenKeeperRequest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::DetectIntent => "detect_intent",
            TemplateId::FillSlots => "fill_slots",
            TemplateId::ClassifyReply => "classify_reply",
            TemplateId::DeriveAddition => "derive_addition",
            TemplateId::GenClarifyQuestion => "gen_clarify_question",
            TemplateId::GenKeeperRequest => "gen_keeper_request",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s.trim())
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::DetectIntent => DETECT_INTENT,
            TemplateId::FillSlots => FILL_SLOTS,
            TemplateId::ClassifyReply => CLASSIFY_REPLY,
            TemplateId::DeriveAddition => DERIVE_ADDITION,
            TemplateId::GenClarifyQuestion => GEN_CLARIFY_QUESTION,
            TemplateId::GenKeeperRequest => GEN_KEEPER_REQUEST,
        }
    }

    /// Placeholder names the body uses, in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (_, name, _) in scan_placeholders(self.body()) {
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Marker on the first line of every rendered prompt.
pub const TEMPLATE_MARKER: &str = "#template: ";

/// Appended to a prompt when the first completion had no usable JSON object.
pub const RETRY_SUFFIX: &str = "\n\nAnswer with only the JSON object.";

const DETECT_INTENT: &str = "#template: detect_intent
You are the language module of a care-home assistant robot. Decide which known intent the latest utterance expresses and extract slot values that were actually said.
## Known intents
{known_intents}
## Interlocutor
{interlocutor}
## Conversation
{transcript}
## Answer format
Reply with one JSON object: {\"intent\": \"<known intent name or unknown>\", \"slots\": {\"<slot>\": \"<value>\"}}";

const FILL_SLOTS: &str = "#template: fill_slots
You are the language module of a care-home assistant robot. The robot asked the interlocutor for missing details of a request. Extract the slot values given in the latest utterance. Only use words that were actually said.
## Focus intent
{focus_intent}
## Missing slots
{missing_slots}
## Filled slots
{filled_slots}
## Interlocutor
{interlocutor}
## Conversation
{transcript}
## Answer format
Reply with one JSON object: {\"intent\": \"<focus intent name>\", \"slots\": {\"<slot>\": \"<value>\"}}";

const CLASSIFY_REPLY: &str = "#template: classify_reply
You are the language module of a care-home assistant robot. The robot made a request to the keeper. Classify the keeper's latest reply as one of: answer, unexpected_question, availability_constraint, confirmation.
## Focus intent
{focus_intent}
## Filled slots
{filled_slots}
## Interlocutor
{interlocutor}
## Conversation
{transcript}
## Answer format
Reply with one JSON object: {\"kind\": \"<answer|unexpected_question|availability_constraint|confirmation>\", \"question\": \"<the question, if any>\"}";

const DERIVE_ADDITION: &str = "#template: derive_addition
You are the language module of a care-home assistant robot. The keeper said something the current intent cannot handle. Propose one addition to the intent database: a new slot on an existing intent, a new item-specific intent named bring_<item> with one slot, or the set of available options for a slot.
## Known intents
{known_intents}
## Focus intent
{focus_intent}
## Filled slots
{filled_slots}
## Conversation
{transcript}
## Answer format
Reply with one JSON object: {\"intent\": \"<intent name>\", \"slot\": {\"name\": \"<slot>\", \"description\": \"<text>\"}, \"options\": [\"<value>\"]}";

const GEN_CLARIFY_QUESTION: &str = "#template: gen_clarify_question
You are a polite care-home assistant robot. Ask the interlocutor one short question to fill the first missing slot.
## Focus intent
{focus_intent}
## Missing slots
{missing_slots}
## Filled slots
{filled_slots}
## Interlocutor
{interlocutor}
## Conversation
{transcript}
## Answer format
Reply with one JSON object: {\"text\": \"<question>\"}";

const GEN_KEEPER_REQUEST: &str = "#template: gen_keeper_request
You are a polite care-home assistant robot standing in the kitchen. Ask the keeper for the item, naming every detail that is already known.
## Focus intent
{focus_intent}
## Filled slots
{filled_slots}
## Interlocutor
{interlocutor}
## Conversation
{transcript}
## Answer format
Reply with one JSON object: {\"text\": \"<request>\"}";

/// `(start, name, end)` for every `{name}` token with `name` in `[a-z_]+`.
fn scan_placeholders(body: &str) -> Vec<(usize, &str, usize)> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, &body[i + 1..j], j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

pub type Bindings = BTreeMap<&'static str, String>;

pub fn render(id: TemplateId, bindings: &Bindings) -> Result<String, LlmError> {
    let body = id.body();
    let mut out = String::with_capacity(body.len() + 256);
    let mut last = 0;
    for (start, name, end) in scan_placeholders(body) {
        let value = bindings
            .get(name)
            .ok_or_else(|| LlmError::MissingPlaceholder(name.to_string()))?;
        out.push_str(&body[last..start]);
        out.push_str(value.trim_end_matches('\n'));
        last = end;
    }
    out.push_str(&body[last..]);
    Ok(out)
}

/// Canonical listing of the catalog: one intent per line.
pub fn list_known_intents(catalog: &Catalog) -> String {
    let lines: Vec<String> = catalog.list_intents().into_iter().map(intent_line).collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

fn intent_line(intent: &IntentSpec) -> String {
    let slots: Vec<String> = intent
        .slots
        .iter()
        .map(|s| {
            if s.options.is_empty() {
                s.name.clone()
            } else {
                format!("{}=[{}]", s.name, s.options.join("|"))
            }
        })
        .collect();
    let mut line = format!("- {}({})", intent.name, slots.join(", "));
    if !intent.description.is_empty() {
        line.push_str(" -- ");
        line.push_str(&intent.description);
    }
    line
}

/// `- name; options: a, b; question: ...; about: ...`, one slot per line.
pub fn list_slots<'a>(slots: impl IntoIterator<Item = &'a SlotSpec>) -> String {
    let lines: Vec<String> = slots
        .into_iter()
        .map(|s| {
            let mut line = format!("- {}", s.name);
            if !s.options.is_empty() {
                line.push_str(&format!("; options: {}", s.options.join(", ")));
            }
            if let Some(q) = &s.clarifying_question {
                line.push_str(&format!("; question: {q}"));
            }
            if !s.description.is_empty() {
                line.push_str(&format!("; about: {}", s.description));
            }
            line
        })
        .collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

/// `- name = value` lines in the given order.
pub fn list_fills<'a>(fills: impl IntoIterator<Item = (&'a String, &'a String)>) -> String {
    let lines: Vec<String> = fills.into_iter().map(|(k, v)| format!("- {k} = {v}")).collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

/// `key: value` lines describing the intent in focus.
pub fn focus_block(pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| format!("{k}: {}", v.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

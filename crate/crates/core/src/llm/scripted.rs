//! Deterministic rule-table backend.
//!
//! A prompt is split into named fields (its template id, every `## Section`,
//! plus a few derived values such as the latest heard utterance). Rules are
//! tried in order; the first whose template matches, whose `pattern` matches
//! its `field`, and whose `require` clauses all match, produces the
//! completion. `respond` is an envelope template where `$1`..`$9` refer to
//! the pattern's capture groups and `${name}` to prompt fields. Substituted
//! values are JSON-escaped.

use std::collections::BTreeMap;
use std::path::Path;

use regex::{Captures, Regex};
use serde::Deserialize;
use serde_json::json;

use super::backend::{BackendError, CompletionBackend};
use super::template::{TemplateId, TEMPLATE_MARKER};

#[derive(Debug, Clone, Deserialize)]
struct RuleFile {
    #[serde(default)]
    name: Option<String>,
    rules: Vec<RuleDef>,
    #[serde(default)]
    fallback: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleDef {
    name: String,
    template: TemplateId,
    #[serde(default)]
    field: Option<String>,
    #[serde(default)]
    pattern: Option<String>,
    #[serde(default)]
    require: Vec<RequireDef>,
    #[serde(default)]
    respond: Option<String>,
    #[serde(default)]
    builtin: Option<Builtin>,
}

#[derive(Debug, Clone, Deserialize)]
struct RequireDef {
    field: String,
    pattern: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Builtin {
    /// Fill missing slots of the focus intent with option words heard in the
    /// latest utterance.
    OptionFill,
}

#[derive(Debug)]
enum Action {
    Respond(String),
    Builtin(Builtin),
}

#[derive(Debug)]
struct Rule {
    name: String,
    template: TemplateId,
    field: String,
    pattern: Regex,
    require: Vec<(String, String)>,
    action: Action,
}

/// Default completion when no rule matches: prose without an envelope.
const DEFAULT_FALLBACK: &str = "I am not sure how to answer that.";

#[derive(Debug)]
pub struct ScriptedBackend {
    identity: String,
    rules: Vec<Rule>,
    fallback: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rule file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule file is not valid: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("rule `{rule}`: {message}")]
    Invalid { rule: String, message: String },
}

impl ScriptedBackend {
    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let file: RuleFile = serde_json::from_str(text)?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for def in file.rules {
            let invalid = |message: String| RuleError::Invalid {
                rule: def.name.clone(),
                message,
            };
            let action = match (&def.respond, def.builtin) {
                (Some(r), None) => Action::Respond(r.clone()),
                (None, Some(b)) => Action::Builtin(b),
                _ => return Err(invalid("needs exactly one of `respond` or `builtin`".into())),
            };
            let pattern = def.pattern.as_deref().unwrap_or("");
            let pattern = Regex::new(pattern).map_err(|e| invalid(e.to_string()))?;
            for req in &def.require {
                // Validate with captures blanked out.
                let probe = substitute(&req.pattern, None, &Fields::default(), regex::escape);
                Regex::new(&probe).map_err(|e| invalid(e.to_string()))?;
            }
            rules.push(Rule {
                name: def.name.clone(),
                template: def.template,
                field: def.field.clone().unwrap_or_else(|| "last_utterance".to_string()),
                pattern,
                require: def.require.iter().map(|r| (r.field.clone(), r.pattern.clone())).collect(),
                action,
            });
        }
        Ok(Self {
            identity: format!("scripted:{}", file.name.unwrap_or_else(|| "rules".to_string())),
            rules,
            fallback: file.fallback.unwrap_or_else(|| DEFAULT_FALLBACK.to_string()),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, RuleError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    /// Name of the rule that would answer `prompt`, if any.
    pub fn matching_rule(&self, prompt: &str) -> Option<&str> {
        let fields = Fields::parse(prompt);
        self.find(&fields).map(|(rule, _)| rule.name.as_str())
    }

    fn find<'a, 'f>(&'a self, fields: &'f Fields) -> Option<(&'a Rule, Option<Captures<'f>>)> {
        let template = fields.template?;
        for rule in self.rules.iter().filter(|r| r.template == template) {
            let haystack = fields.get(&rule.field);
            let Some(caps) = rule.pattern.captures(haystack) else {
                continue;
            };
            let ok = rule.require.iter().all(|(field, pattern)| {
                let pattern = substitute(pattern, Some(&caps), fields, regex::escape);
                Regex::new(&pattern)
                    .map(|re| re.is_match(fields.get(field)))
                    .unwrap_or(false)
            });
            if ok {
                return Some((rule, Some(caps)));
            }
        }
        None
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let fields = Fields::parse(prompt);
        let Some((rule, caps)) = self.find(&fields) else {
            return Ok(self.fallback.clone());
        };
        Ok(match &rule.action {
            Action::Respond(template) => substitute(template, caps.as_ref(), &fields, json_escape),
            Action::Builtin(Builtin::OptionFill) => option_fill(&fields),
        })
    }

    fn identity(&self) -> &str {
        &self.identity
    }

    fn is_scripted(&self) -> bool {
        true
    }
}

fn json_escape(s: &str) -> String {
    let quoted = serde_json::to_string(s).expect("string serializes");
    quoted[1..quoted.len() - 1].to_string()
}

/// Expands `$N` and `${name}`; `$$` is a literal dollar.
fn substitute(
    template: &str,
    caps: Option<&Captures<'_>>,
    fields: &Fields,
    escape: fn(&str) -> String,
) -> String {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c != '$' {
            out.push(c);
            continue;
        }
        match chars.peek().copied() {
            Some((_, '$')) => {
                chars.next();
                out.push('$');
            }
            Some((_, d)) if d.is_ascii_digit() => {
                chars.next();
                let idx = d.to_digit(10).unwrap() as usize;
                let value = caps.and_then(|c| c.get(idx)).map_or("", |m| m.as_str());
                out.push_str(&escape(value));
            }
            Some((_, '{')) => match template[i + 2..].find('}') {
                Some(rel) => {
                    let name = &template[i + 2..i + 2 + rel];
                    out.push_str(&escape(fields.get(name)));
                    let end = i + 2 + rel;
                    while chars.peek().is_some_and(|(j, _)| *j <= end) {
                        chars.next();
                    }
                }
                None => out.push('$'),
            },
            _ => out.push('$'),
        }
    }
    out
}

#[derive(Debug, Clone)]
struct MissingSlot {
    name: String,
    options: Vec<String>,
    question: Option<String>,
}

/// Named views of a rendered prompt.
#[derive(Debug, Default)]
struct Fields {
    template: Option<TemplateId>,
    values: BTreeMap<String, String>,
    missing: Vec<MissingSlot>,
}

impl Fields {
    fn get(&self, name: &str) -> &str {
        self.values.get(name).map_or("", String::as_str)
    }

    fn parse(prompt: &str) -> Self {
        let mut fields = Fields::default();
        let mut lines = prompt.lines();
        if let Some(first) = lines.next() {
            fields.template = first.strip_prefix(TEMPLATE_MARKER).and_then(TemplateId::parse);
        }
        let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in lines {
            if let Some(header) = line.strip_prefix("## ") {
                let key = match header.trim() {
                    "Conversation" => "transcript".to_string(),
                    other => other.to_lowercase().replace(' ', "_"),
                };
                sections.entry(key.clone()).or_default();
                current = Some(key);
            } else if let Some(key) = &current {
                sections.get_mut(key).expect("section exists").push(line);
            }
        }
        for (key, body) in &sections {
            let text = body.join("\n").trim().to_string();
            fields.values.insert(key.clone(), text);
        }
        fields.values.insert("prompt".to_string(), prompt.to_string());

        // Latest heard utterance and its speaker.
        let transcript = fields.get("transcript").to_string();
        for line in transcript.lines().rev() {
            if let Some((speaker, text)) = parse_heard(line) {
                fields.values.insert("last_utterance".into(), text.to_string());
                fields.values.insert("last_speaker".into(), speaker.to_string());
                break;
            }
        }

        for line in fields.get("focus_intent").to_string().lines() {
            if let Some((k, v)) = line.split_once(": ") {
                fields.values.insert(format!("focus.{}", k.trim()), v.trim().to_string());
            }
        }

        let mut details = Vec::new();
        for line in fields.get("filled_slots").to_string().lines() {
            if let Some((k, v)) = line.trim_start_matches("- ").split_once(" = ") {
                fields.values.insert(format!("fill.{}", k.trim()), v.trim().to_string());
                if k.trim() != "item" {
                    details.push(format!("{}: {}", k.trim(), v.trim()));
                }
            }
        }
        fields.values.insert("fill_details".into(), details.join(", "));

        let subject = [fields.get("focus.item"), fields.get("fill.item")]
            .into_iter()
            .find(|s| !s.is_empty())
            .map(str::to_string)
            .or_else(|| {
                fields
                    .get("focus.name")
                    .strip_prefix("bring_")
                    .map(|s| s.replace('_', " "))
            })
            .unwrap_or_default();
        fields.values.insert("subject".into(), subject);

        let question = match fields.get("focus.question") {
            "" => fields.get("last_utterance").to_string(),
            q => q.to_string(),
        };
        fields.values.insert("question".into(), question);

        fields.missing = fields
            .get("missing_slots")
            .lines()
            .filter_map(parse_missing_slot)
            .collect();
        if let Some(target) = fields.missing.first().cloned() {
            fields.values.insert("target_slot".into(), target.name.clone());
            fields.values.insert("target_options".into(), target.options.join(" or "));
            fields
                .values
                .insert("target_question".into(), target.question.clone().unwrap_or_default());
        }
        fields
    }
}

fn parse_heard(line: &str) -> Option<(&str, &str)> {
    let rest = line.strip_prefix('[')?;
    let (speaker, rest) = rest.split_once("] ")?;
    let text = rest.strip_prefix("Heard: ")?;
    Some((speaker, text))
}

fn parse_missing_slot(line: &str) -> Option<MissingSlot> {
    let line = line.strip_prefix("- ")?;
    let mut parts = line.split("; ");
    let name = parts.next()?.trim().to_string();
    let mut slot = MissingSlot {
        name,
        options: Vec::new(),
        question: None,
    };
    for part in parts {
        if let Some(opts) = part.strip_prefix("options: ") {
            slot.options = opts.split(", ").map(|s| s.trim().to_string()).collect();
        } else if let Some(q) = part.strip_prefix("question: ") {
            slot.question = Some(q.to_string());
        }
    }
    Some(slot)
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '_' && c != '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The asked slot (listed first) takes any of its options heard in the latest
/// utterance. Other missing slots only take an option word that no other
/// missing slot also offers.
fn option_fill(fields: &Fields) -> String {
    let heard = words(fields.get("last_utterance"));
    let heard_has = |opt: &str| {
        let opt_words = words(opt);
        !opt_words.is_empty()
            && heard
                .windows(opt_words.len())
                .any(|w| w == opt_words.as_slice())
    };
    let mut slots = serde_json::Map::new();
    for (idx, slot) in fields.missing.iter().enumerate() {
        let found = slot.options.iter().find(|o| heard_has(o));
        let Some(value) = found else { continue };
        let shared = fields
            .missing
            .iter()
            .enumerate()
            .any(|(j, other)| j != idx && other.options.iter().any(|o| o == value));
        if idx == 0 || !shared {
            slots.insert(slot.name.clone(), json!(value));
        }
    }
    json!({"intent": fields.get("focus.name"), "slots": slots}).to_string()
}

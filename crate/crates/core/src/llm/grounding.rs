use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::{normalize_name, IntentSpec};

pub type SlotFills = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The value never occurs in the conversation.
    Ungrounded,
    /// The slot has options and the value is none of them.
    NotAnOption,
    /// The intent has no such slot.
    UnknownSlot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedFill {
    pub slot: String,
    pub value: String,
    pub reason: DropReason,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Ungrounded => "ungrounded",
            DropReason::NotAnOption => "not an option",
            DropReason::UnknownSlot => "unknown slot",
        }
    }
}

impl std::fmt::Display for DroppedFill {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={} ({})", self.slot, self.value, self.reason.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grounded {
    pub kept: SlotFills,
    pub dropped: Vec<DroppedFill>,
}

/// Keeps only fills whose value occurs in the transcript (case-insensitive)
/// and, for slots with options, matches one of them. Kept option values take
/// the stored option spelling.
pub fn grounding_filter(fills: &SlotFills, intent: &IntentSpec, transcript: &str) -> Grounded {
    let haystack = transcript.to_lowercase();
    let mut out = Grounded::default();
    for (raw_slot, raw_value) in fills {
        let slot_name = normalize_name(raw_slot);
        let value = raw_value.trim().to_lowercase();
        let drop = |reason| DroppedFill {
            slot: slot_name.clone(),
            value: raw_value.clone(),
            reason,
        };
        let Some(slot) = intent.slot(&slot_name) else {
            out.dropped.push(drop(DropReason::UnknownSlot));
            continue;
        };
        if value.is_empty() || !haystack.contains(&value) {
            out.dropped.push(drop(DropReason::Ungrounded));
            continue;
        }
        if slot.options.is_empty() {
            out.kept.insert(slot_name, value);
        } else if let Some(canonical) = slot.canonical_option(&value) {
            out.kept.insert(slot_name, canonical.to_string());
        } else {
            out.dropped.push(drop(DropReason::NotAnOption));
        }
    }
    out
}

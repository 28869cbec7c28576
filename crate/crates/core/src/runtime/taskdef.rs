use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::catalog::{TaskDirectory, BRING_GOODS_TASK};

pub mod state {
    pub const CHECK_SLOTS: &str = "CheckSlots";
    pub const ASK_SENIOR_CLARIFICATION: &str = "AskSeniorClarification";
    pub const NAVIGATE_TO_KITCHEN: &str = "NavigateToKitchen";
    pub const REQUEST_ITEM: &str = "RequestItem";
    pub const AWAIT_KEEPER_REPLY: &str = "AwaitKeeperReply";
    pub const RECEIVE_ITEM: &str = "ReceiveItem";
    pub const NAVIGATE_TO_SENIOR: &str = "NavigateToSenior";
    pub const DELIVER: &str = "Deliver";
    pub const LEARN_ADDITION: &str = "LearnAddition";
    pub const LEARN_OPTIONS: &str = "LearnOptions";
    pub const DONE: &str = "Done";
    pub const FAILED: &str = "Failed";
}

pub mod trigger {
    pub const SLOTS_MISSING: &str = "slots_missing";
    pub const SLOTS_COMPLETE: &str = "slots_complete";
    pub const CLARIFICATION_CAP: &str = "clarification_cap";
    pub const ANSWER: &str = "answer";
    pub const ARRIVED: &str = "arrived";
    pub const REQUEST_SENT: &str = "request_sent";
    pub const CONFIRMATION: &str = "confirmation";
    pub const UNEXPECTED_QUESTION: &str = "unexpected_question";
    pub const AVAILABILITY_CONSTRAINT: &str = "availability_constraint";
    pub const PICKED_UP: &str = "picked_up";
    pub const ARRIVED_WITH_ITEM: &str = "arrived_with_item";
    pub const ARRIVED_TO_CLARIFY: &str = "arrived_to_clarify";
    pub const DELIVERED: &str = "delivered";
    pub const LEARNED: &str = "learned";
    pub const LEARNED_NOTHING_MISSING: &str = "learned_nothing_missing";
    pub const CHOICE_REQUIRED: &str = "choice_required";
    pub const NO_CHOICE: &str = "no_choice";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: String,
    pub trigger: String,
    #[serde(default)]
    pub guard: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub initial_state: String,
    pub states: BTreeSet<String>,
    pub transitions: Vec<Transition>,
}

impl TaskDef {
    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |m: String| Err(TaskError::InvalidDef(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() {
            return invalid("empty name".into());
        }
        if !self.states.contains(&self.initial_state) {
            return invalid(format!("initial state `{}` is not a state", self.initial_state));
        }
        for terminal in [state::DONE, state::FAILED] {
            if !self.states.contains(terminal) {
                return invalid(format!("terminal state `{terminal}` is missing"));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.transitions {
            for end in [&t.from, &t.to] {
                if !self.states.contains(end) {
                    return invalid(format!("transition endpoint `{end}` is not a state"));
                }
            }
            if !seen.insert((t.from.as_str(), t.trigger.as_str())) {
                return invalid(format!("two transitions for ({}, {})", t.from, t.trigger));
            }
            if t.from == state::DONE || t.from == state::FAILED {
                return invalid(format!("transition out of terminal state `{}`", t.from));
            }
        }
        Ok(())
    }

    pub fn next_state(&self, from: &str, trigger: &str) -> Option<&str> {
        self.transitions
            .iter()
            .find(|t| t.from == from && t.trigger == trigger)
            .map(|t| t.to.as_str())
    }

    pub fn has_transition(&self, from: &str, trigger: &str, to: &str) -> bool {
        self.next_state(from, trigger) == Some(to)
    }
}

/// The compiled-in bring-goods machine.
pub fn bring_goods_task() -> TaskDef {
    use state::*;
    use trigger::*;
    let table: [(&str, &str, &str, &str); 19] = [
        (CHECK_SLOTS, SLOTS_MISSING, "a required slot is unfilled", ASK_SENIOR_CLARIFICATION),
        (CHECK_SLOTS, SLOTS_COMPLETE, "every required slot is filled", NAVIGATE_TO_KITCHEN),
        (CHECK_SLOTS, CLARIFICATION_CAP, "clarification round-trips exhausted", FAILED),
        (ASK_SENIOR_CLARIFICATION, ANSWER, "senior replied", CHECK_SLOTS),
        (NAVIGATE_TO_KITCHEN, ARRIVED, "navigation finished", REQUEST_ITEM),
        (REQUEST_ITEM, REQUEST_SENT, "request spoken to keeper", AWAIT_KEEPER_REPLY),
        (AWAIT_KEEPER_REPLY, CONFIRMATION, "keeper hands over the item", RECEIVE_ITEM),
        (AWAIT_KEEPER_REPLY, AVAILABILITY_CONSTRAINT, "keeper states what is available", LEARN_OPTIONS),
        (AWAIT_KEEPER_REPLY, UNEXPECTED_QUESTION, "keeper asks something the intent cannot answer", LEARN_ADDITION),
        (AWAIT_KEEPER_REPLY, ANSWER, "keeper reply needs no action", AWAIT_KEEPER_REPLY),
        (RECEIVE_ITEM, PICKED_UP, "item picked up", NAVIGATE_TO_SENIOR),
        (NAVIGATE_TO_SENIOR, ARRIVED_WITH_ITEM, "carrying the item", DELIVER),
        (NAVIGATE_TO_SENIOR, ARRIVED_TO_CLARIFY, "returned to ask the senior", ASK_SENIOR_CLARIFICATION),
        (DELIVER, DELIVERED, "item handed over", DONE),
        (LEARN_ADDITION, LEARNED, "addition applied, slots missing", NAVIGATE_TO_SENIOR),
        (LEARN_ADDITION, LEARNED_NOTHING_MISSING, "addition applied, nothing missing", REQUEST_ITEM),
        (LEARN_OPTIONS, CHOICE_REQUIRED, "senior must choose", NAVIGATE_TO_SENIOR),
        (LEARN_OPTIONS, NO_CHOICE, "no choice left", REQUEST_ITEM),
        (NAVIGATE_TO_SENIOR, CLARIFICATION_CAP, "clarification round-trips exhausted", FAILED),
    ];
    let transitions: Vec<Transition> = table
        .iter()
        .map(|(from, trigger, guard, to)| Transition {
            from: from.to_string(),
            trigger: trigger.to_string(),
            guard: guard.to_string(),
            to: to.to_string(),
        })
        .collect();
    let states = [
        CHECK_SLOTS,
        ASK_SENIOR_CLARIFICATION,
        NAVIGATE_TO_KITCHEN,
        REQUEST_ITEM,
        AWAIT_KEEPER_REPLY,
        RECEIVE_ITEM,
        NAVIGATE_TO_SENIOR,
        DELIVER,
        LEARN_ADDITION,
        LEARN_OPTIONS,
        DONE,
        FAILED,
    ]
    .into_iter()
    .map(str::to_string)
    .collect();
    TaskDef {
        name: BRING_GOODS_TASK.to_string(),
        initial_state: CHECK_SLOTS.to_string(),
        states,
        transitions,
    }
}

#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    defs: BTreeMap<String, TaskDef>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the compiled-in bring-goods task.
    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        r.register_task(bring_goods_task()).expect("builtin task is valid");
        r
    }

    pub fn register_task(&mut self, def: TaskDef) -> Result<(), TaskError> {
        def.validate()?;
        if self.defs.contains_key(&def.name) {
            return Err(TaskError::DuplicateTask(def.name));
        }
        self.defs.insert(def.name.clone(), def);
        Ok(())
    }

    /// Registers every definition in a JSON file holding one def or an array.
    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<usize, TaskError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| TaskError::InvalidDef(format!("{}: {e}", path.as_ref().display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TaskError::InvalidDef(e.to_string()))?;
        let defs: Vec<TaskDef> = match value {
            serde_json::Value::Array(_) => serde_json::from_value(value),
            _ => serde_json::from_value(value).map(|d| vec![d]),
        }
        .map_err(|e| TaskError::InvalidDef(e.to_string()))?;
        let n = defs.len();
        for def in defs {
            self.register_task(def)?;
        }
        Ok(n)
    }

    pub fn get(&self, name: &str) -> Option<&TaskDef> {
        self.defs.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.defs.keys().map(String::as_str)
    }
}

impl TaskDirectory for TaskRegistry {
    fn contains_task(&self, name: &str) -> bool {
        self.defs.contains_key(name)
    }
}

//! Simulated care home: locations, the robot's position and load, and a
//! scripted keeper who asks about unspecified item attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::normalize_name;

pub const SENIOR_ROOM: &str = "senior_room";
pub const KITCHEN: &str = "kitchen";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world config i/o on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("illegal action {action}: {reason}")]
    IllegalAction { action: String, reason: String },
    #[error("unknown item `{0}`")]
    UnknownItem(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub values: Vec<String>,
    /// What the keeper asks when this attribute is left open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

impl Dimension {
    pub fn key(&self) -> String {
        normalize_name(&self.name)
    }

    pub fn question_for(&self, item: &str) -> String {
        match &self.question {
            Some(q) => q.clone(),
            None if self.key() == "which" => format!("Which {item}?"),
            None => format!("What {} of {item}?", self.name),
        }
    }

    fn value_matching(&self, value: &str) -> Option<&str> {
        let v = value.trim().to_lowercase();
        self.values.iter().find(|x| x.to_lowercase() == v).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Travel {
    pub from: String,
    pub to: String,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub locations: BTreeSet<String>,
    pub items: BTreeMap<String, Vec<Dimension>>,
    pub travel_ticks: Vec<Travel>,
}

impl WorldConfig {
    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let config: WorldConfig =
            serde_json::from_str(text).map_err(|e| WorldError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| WorldError::IoFailure {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let invalid = |m: String| Err(WorldError::InvalidConfig(m));
        for required in [SENIOR_ROOM, KITCHEN] {
            if !self.locations.contains(required) {
                return invalid(format!("location `{required}` is required"));
            }
        }
        for (item, dims) in &self.items {
            let mut seen = BTreeSet::new();
            for dim in dims {
                if dim.values.is_empty() {
                    return invalid(format!("`{item}.{}` has an empty value set", dim.name));
                }
                if !seen.insert(dim.key()) {
                    return invalid(format!("`{item}.{}` is declared twice", dim.name));
                }
            }
        }
        let mut ticks = BTreeMap::new();
        for t in &self.travel_ticks {
            for loc in [&t.from, &t.to] {
                if !self.locations.contains(loc) {
                    return invalid(format!("travel references unknown location `{loc}`"));
                }
            }
            if t.ticks == 0 {
                return invalid(format!("travel {} -> {} must take at least one tick", t.from, t.to));
            }
            ticks.insert((t.from.as_str(), t.to.as_str()), t.ticks);
        }
        for ((from, to), n) in &ticks {
            if ticks.get(&(*to, *from)) != Some(n) {
                return invalid(format!("travel_ticks not symmetric for {from} <-> {to}"));
            }
        }
        Ok(())
    }

    pub fn travel(&self, from: &str, to: &str) -> Option<u64> {
        if from == to {
            return Some(0);
        }
        self.travel_ticks
            .iter()
            .find(|t| t.from == from && t.to == to)
            .map(|t| t.ticks)
    }

    pub fn dimensions(&self, item: &str) -> Option<&[Dimension]> {
        let key = item.trim().to_lowercase();
        self.items
            .iter()
            .find(|(name, _)| name.to_lowercase() == key)
            .map(|(_, dims)| dims.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarriedItem {
    pub item: String,
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot_location: String,
    pub carried_item: Option<CarriedItem>,
    pub tick: u64,
    /// Items handed to the senior, in order.
    #[serde(default)]
    pub delivered: Vec<CarriedItem>,
}

impl WorldState {
    pub fn new() -> Self {
        Self {
            robot_location: SENIOR_ROOM.to_string(),
            carried_item: None,
            tick: 0,
            delivered: Vec::new(),
        }
    }
}

impl Default for WorldState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RobotAction {
    NavigateTo { location: String },
    PickUp { item: String, attrs: BTreeMap<String, String> },
    Deliver,
}

impl RobotAction {
    pub fn navigate(location: &str) -> Self {
        RobotAction::NavigateTo {
            location: location.to_string(),
        }
    }

    /// Display label, e.g. `NavigateToKitchen` or `NavigateToSenior`.
    pub fn label(&self) -> String {
        match self {
            RobotAction::NavigateTo { location } => {
                let place = location.strip_suffix("_room").unwrap_or(location);
                let camel: String = place
                    .split('_')
                    .map(|w| {
                        let mut c = w.chars();
                        c.next()
                            .map(|f| f.to_uppercase().chain(c).collect::<String>())
                            .unwrap_or_default()
                    })
                    .collect();
                format!("NavigateTo{camel}")
            }
            RobotAction::PickUp { .. } => "PickUp".to_string(),
            RobotAction::Deliver => "Deliver".to_string(),
        }
    }
}

/// Completion notice for an applied action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionFinished {
    pub action: RobotAction,
    pub ticks: u64,
    pub tick: u64,
}

/// Applies `action`, advancing the tick counter; `state` is unchanged on error.
pub fn apply_action(
    config: &WorldConfig,
    state: &mut WorldState,
    action: &RobotAction,
) -> Result<ActionFinished, WorldError> {
    let illegal = |reason: &str| WorldError::IllegalAction {
        action: action.label(),
        reason: reason.to_string(),
    };
    let ticks = match action {
        RobotAction::NavigateTo { location } => {
            if !config.locations.contains(location) {
                return Err(illegal("unknown location"));
            }
            let ticks = config
                .travel(&state.robot_location, location)
                .ok_or_else(|| illegal("no route"))?;
            state.robot_location = location.clone();
            ticks
        }
        RobotAction::PickUp { item, attrs } => {
            if state.robot_location != KITCHEN {
                return Err(illegal("items are picked up in the kitchen"));
            }
            if state.carried_item.is_some() {
                return Err(illegal("already carrying an item"));
            }
            let dims = config.dimensions(item).ok_or_else(|| illegal("unknown item"))?;
            let mut chosen = BTreeMap::new();
            for (slot, value) in attrs {
                let key = normalize_name(slot);
                let Some(dim) = dims.iter().find(|d| d.key() == key) else {
                    continue;
                };
                let v = dim
                    .value_matching(value)
                    .ok_or_else(|| illegal(&format!("`{value}` is not a {} {item}", dim.name)))?;
                chosen.insert(key, v.to_string());
            }
            state.carried_item = Some(CarriedItem {
                item: item.clone(),
                attrs: chosen,
            });
            1
        }
        RobotAction::Deliver => {
            if state.robot_location != SENIOR_ROOM {
                return Err(illegal("deliveries happen in the senior's room"));
            }
            let item = state.carried_item.take().ok_or_else(|| illegal("nothing to deliver"))?;
            state.delivered.push(item);
            1
        }
    };
    state.tick += ticks;
    Ok(ActionFinished {
        action: action.clone(),
        ticks,
        tick: state.tick,
    })
}

/// What the robot asked the keeper for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeeperRequest {
    pub item: String,
    /// Slot fills; keys are matched to attribute names after normalization.
    pub fills: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeeperReplyKind {
    Question,
    Constraint,
    Confirmation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeeperReply {
    pub kind: KeeperReplyKind,
    pub text: String,
    /// Attribute asked about, to be added to the errand's asked history.
    pub asked: Option<String>,
}

fn or_list(values: &[String]) -> String {
    match values {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} or {last}", init.join(", ")),
    }
}

/// The scripted keeper. Asks about the first open attribute with a real
/// choice that was not asked before in this errand; otherwise states a
/// constraint for missing or unavailable values; otherwise hands the item over.
pub fn keeper_reply(
    request: &KeeperRequest,
    config: &WorldConfig,
    asked_history: &[String],
) -> Result<KeeperReply, WorldError> {
    let dims = config
        .dimensions(&request.item)
        .ok_or_else(|| WorldError::UnknownItem(request.item.clone()))?;
    let fills: BTreeMap<String, &str> = request
        .fills
        .iter()
        .map(|(k, v)| (normalize_name(k), v.as_str()))
        .collect();
    let item = request.item.trim().to_lowercase();

    for dim in dims {
        let key = dim.key();
        if !fills.contains_key(&key) && dim.values.len() > 1 && !asked_history.contains(&key) {
            return Ok(KeeperReply {
                kind: KeeperReplyKind::Question,
                text: dim.question_for(&item),
                asked: Some(key),
            });
        }
    }
    for dim in dims {
        let ok = fills
            .get(&dim.key())
            .is_some_and(|v| dim.value_matching(v).is_some());
        if !ok {
            return Ok(KeeperReply {
                kind: KeeperReplyKind::Constraint,
                text: format!("We only have {} {item}.", or_list(&dim.values)),
                asked: None,
            });
        }
    }
    Ok(KeeperReply {
        kind: KeeperReplyKind::Confirmation,
        text: "Here you are.".to_string(),
        asked: None,
    })
}

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::taskdef::{state, trigger, TaskRegistry};
use super::TaskError;
use crate::catalog::{normalize_name, Catalog, CatalogError, IntentSpec, SharedCatalog, SlotSpec};
use crate::context::{payload, render_transcript, Actor, ContextError, ContextEvent, ContextStore, EventKind, Payload, SessionId};
use crate::llm::{
    item_of, CompletionBackend, DroppedFill, Focus, Interpretation, LanguageProcessor, ReplyKind, SlotFills,
};
use crate::world::{KeeperRequest, RobotAction, KITCHEN, SENIOR_ROOM};

/// Clarification questions allowed per task instance before it fails.
pub const DEFAULT_MAX_ROUND_TRIPS: u32 = 8;

/// Where the runtime records what happens and reads conversation context.
pub trait Journal {
    fn record(&mut self, actor: Actor, kind: EventKind, payload: Payload) -> Result<ContextEvent, ContextError>;

    /// Recent context joined to prompts.
    fn transcript(&self) -> String;

    /// Everything the humans said; slot fills are grounded against this.
    fn heard_transcript(&self) -> String;
}

/// [`Journal`] backed by one session of a [`ContextStore`].
pub struct SessionJournal<'a> {
    store: &'a ContextStore,
    session: &'a SessionId,
    max_lines: usize,
}

impl<'a> SessionJournal<'a> {
    pub fn new(store: &'a ContextStore, session: &'a SessionId, max_lines: usize) -> Self {
        Self { store, session, max_lines }
    }
}

impl Journal for SessionJournal<'_> {
    fn record(&mut self, actor: Actor, kind: EventKind, payload: Payload) -> Result<ContextEvent, ContextError> {
        self.store.append(self.session, actor, kind, payload)
    }

    fn transcript(&self) -> String {
        self.store.transcript(self.session, self.max_lines).unwrap_or_default()
    }

    fn heard_transcript(&self) -> String {
        let events = self.store.events(self.session, 1).unwrap_or_default();
        let heard: Vec<ContextEvent> = events.into_iter().filter(|e| e.kind == EventKind::Heard).collect();
        render_transcript(&heard, usize::MAX)
    }
}

pub struct StepContext<'a> {
    pub catalog: &'a SharedCatalog,
    pub backend: &'a dyn CompletionBackend,
    pub journal: &'a mut dyn Journal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    UtteranceArrived { actor: Actor, text: String },
    ActionFinished { action: RobotAction },
    InterpretationReady { interpretation: Interpretation },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LearnedChange {
    Intent { intent: String, task: String },
    Slot { intent: String, slot: String, options: Vec<String> },
    Options { intent: String, slot: String, options: Vec<String> },
}

/// What the caller must do after a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    Perform { action: RobotAction },
    Speak { to: Actor, text: String },
    Learned { change: LearnedChange },
    Completed,
    Failed { reason: String },
    /// The event was not relevant to the current state.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from: String,
    pub trigger: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task: String,
    pub session: SessionId,
    pub intent_name: String,
    pub slot_fills: SlotFills,
    pub state: String,
    pub focus_slot: Option<String>,
    pub pending_keeper_request: Option<String>,
    pub round_trips: u32,
    pub kitchen_trips: u32,
    pub carrying: bool,
    pub trace: Vec<TransitionRecord>,
}

impl TaskInstance {
    pub fn item(&self) -> String {
        item_of(&self.intent_name, &self.slot_fills)
    }

    /// The structured request the robot makes in the kitchen.
    pub fn keeper_request(&self) -> KeeperRequest {
        KeeperRequest {
            item: self.item(),
            fills: self
                .slot_fills
                .iter()
                .filter(|(k, _)| k.as_str() != "item")
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.state == state::DONE || self.state == state::FAILED
    }

    /// Whose utterance the instance is waiting for, if anyone's.
    pub fn awaiting(&self) -> Option<Actor> {
        match self.state.as_str() {
            state::ASK_SENIOR_CLARIFICATION => Some(Actor::Senior),
            state::AWAIT_KEEPER_REPLY => Some(Actor::Keeper),
            _ => None,
        }
    }
}

/// Runs bring-goods style task instances. Every transition taken must exist
/// in the instance's [`TaskDef`](super::TaskDef).
#[derive(Debug, Clone)]
pub struct TaskRuntime {
    registry: TaskRegistry,
    lang: LanguageProcessor,
    max_round_trips: u32,
}

impl Default for TaskRuntime {
    fn default() -> Self {
        Self::new(TaskRegistry::with_builtin())
    }
}

impl TaskRuntime {
    pub fn new(registry: TaskRegistry) -> Self {
        Self {
            registry,
            lang: LanguageProcessor::new(),
            max_round_trips: DEFAULT_MAX_ROUND_TRIPS,
        }
    }

    pub fn with_max_round_trips(mut self, cap: u32) -> Self {
        self.max_round_trips = cap;
        self
    }

    pub fn with_language_processor(mut self, lang: LanguageProcessor) -> Self {
        self.lang = lang;
        self
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn language(&self) -> &LanguageProcessor {
        &self.lang
    }

    /// Required slots of the instance's intent that have no fill, in catalog order.
    pub fn missing_slots(&self, instance: &TaskInstance, catalog: &Catalog) -> Result<Vec<String>, TaskError> {
        let intent = catalog
            .intent(&instance.intent_name)
            .ok_or_else(|| TaskError::UnknownIntent(instance.intent_name.clone()))?;
        Ok(intent
            .slots
            .iter()
            .filter(|s| s.required && !instance.slot_fills.contains_key(&s.name))
            .map(|s| s.name.clone())
            .collect())
    }

    /// Creates an instance in the task's initial state and records `TaskStarted`.
    /// Call [`TaskRuntime::start`] to begin advancing it.
    pub fn dispatch(
        &self,
        intent_name: &str,
        fills: SlotFills,
        dropped: &[DroppedFill],
        session: &SessionId,
        ctx: &mut StepContext<'_>,
    ) -> Result<TaskInstance, TaskError> {
        let catalog = ctx.catalog.snapshot();
        let task = catalog.resolve_task(intent_name).map_err(TaskError::NoBinding)?.to_string();
        let def = self.registry.get(&task).ok_or_else(|| TaskError::UnknownTask(task.clone()))?;
        let intent = catalog
            .intent(intent_name)
            .ok_or_else(|| TaskError::UnknownIntent(intent_name.to_string()))?;
        let slot_fills = restrict_fills(intent, fills);
        let summary = summarize(&intent.name, &slot_fills);
        let mut p = payload([("intent", intent.name.as_str()), ("task", task.as_str()), ("text", summary.as_str())]);
        if !dropped.is_empty() {
            p.insert("dropped".into(), describe_dropped(dropped));
        }
        let started = ctx.journal.record(Actor::System, EventKind::TaskStarted, p)?;
        Ok(TaskInstance {
            id: format!("task-{}", started.seq),
            task,
            session: session.clone(),
            intent_name: intent.name.clone(),
            slot_fills,
            state: def.initial_state.clone(),
            focus_slot: None,
            pending_keeper_request: None,
            round_trips: 0,
            kitchen_trips: 0,
            carrying: false,
            trace: Vec::new(),
        })
    }

    /// Runs the entry logic of the instance's current (initial) state.
    pub fn start(&self, instance: &mut TaskInstance, ctx: &mut StepContext<'_>) -> Result<Vec<Effect>, TaskError> {
        let mut effects = Vec::new();
        self.run(instance, ctx, &mut effects)?;
        Ok(effects)
    }

    pub fn advance(
        &self,
        instance: &mut TaskInstance,
        event: EngineEvent,
        ctx: &mut StepContext<'_>,
    ) -> Result<Vec<Effect>, TaskError> {
        use state::*;
        let mut effects = Vec::new();
        let current = instance.state.clone();
        match (current.as_str(), event) {
            (ASK_SENIOR_CLARIFICATION, EngineEvent::UtteranceArrived { actor: Actor::Senior, text }) => {
                let catalog = ctx.catalog.snapshot();
                let transcript = ctx.journal.transcript();
                let heard = ctx.journal.heard_transcript();
                let focus = Focus {
                    intent: &instance.intent_name,
                    fills: &instance.slot_fills,
                    asked_slot: instance.focus_slot.as_deref(),
                };
                let interpretation =
                    self.lang
                        .detect_intent_grounded(&text, &catalog, &transcript, &heard, Some(focus), ctx.backend)?;
                self.apply_answer(instance, interpretation, &catalog, ctx, &mut effects)?;
            }
            (ASK_SENIOR_CLARIFICATION, EngineEvent::InterpretationReady { interpretation }) => {
                let catalog = ctx.catalog.snapshot();
                self.apply_answer(instance, interpretation, &catalog, ctx, &mut effects)?;
            }
            (NAVIGATE_TO_KITCHEN, EngineEvent::ActionFinished { action: RobotAction::NavigateTo { location } })
                if location == KITCHEN =>
            {
                self.transition(instance, trigger::ARRIVED, ctx)?;
                self.run(instance, ctx, &mut effects)?;
            }
            (AWAIT_KEEPER_REPLY, EngineEvent::UtteranceArrived { actor: Actor::Keeper, text }) => {
                let transcript = ctx.journal.transcript();
                let pending = instance.pending_keeper_request.clone().unwrap_or_default();
                let interpretation = self.lang.classify_keeper_reply(
                    &text,
                    &instance.intent_name,
                    &pending,
                    &instance.slot_fills,
                    &transcript,
                    ctx.backend,
                )?;
                let Interpretation::ReplyClassified { kind, question_text } = interpretation else {
                    unreachable!("classify_keeper_reply yields ReplyClassified");
                };
                self.handle_reply(instance, kind, question_text, &text, ctx, &mut effects)?;
            }
            (
                AWAIT_KEEPER_REPLY,
                EngineEvent::InterpretationReady {
                    interpretation: Interpretation::ReplyClassified { kind, question_text },
                },
            ) => {
                let reply = question_text.clone().unwrap_or_default();
                self.handle_reply(instance, kind, question_text, &reply, ctx, &mut effects)?;
            }
            (RECEIVE_ITEM, EngineEvent::ActionFinished { action: RobotAction::PickUp { .. } }) => {
                instance.carrying = true;
                self.transition(instance, trigger::PICKED_UP, ctx)?;
                self.run(instance, ctx, &mut effects)?;
            }
            (NAVIGATE_TO_SENIOR, EngineEvent::ActionFinished { action: RobotAction::NavigateTo { location } })
                if location == SENIOR_ROOM =>
            {
                if instance.carrying {
                    self.transition(instance, trigger::ARRIVED_WITH_ITEM, ctx)?;
                } else if instance.round_trips >= self.max_round_trips {
                    self.transition(instance, trigger::CLARIFICATION_CAP, ctx)?;
                    effects.push(Effect::Failed {
                        reason: "clarification round-trips exhausted".into(),
                    });
                } else {
                    let missing = self.missing_slots(instance, &ctx.catalog.snapshot())?;
                    instance.focus_slot = missing.first().cloned();
                    self.transition(instance, trigger::ARRIVED_TO_CLARIFY, ctx)?;
                }
                self.run(instance, ctx, &mut effects)?;
            }
            (DELIVER, EngineEvent::ActionFinished { action: RobotAction::Deliver }) => {
                instance.carrying = false;
                self.transition(instance, trigger::DELIVERED, ctx)?;
                let summary = summarize(&instance.intent_name, &instance.slot_fills);
                let item = instance.item();
                ctx.journal.record(
                    Actor::System,
                    EventKind::TaskCompleted,
                    payload([
                        ("intent", instance.intent_name.as_str()),
                        ("item", item.as_str()),
                        ("text", summary.as_str()),
                    ]),
                )?;
                effects.push(Effect::Completed);
            }
            (_, event) => {
                debug!(state = %current, ?event, "event ignored");
                effects.push(Effect::Ignored);
            }
        }
        Ok(effects)
    }

    fn transition(&self, instance: &mut TaskInstance, trigger: &str, ctx: &mut StepContext<'_>) -> Result<(), TaskError> {
        self.transition_noting(instance, trigger, Payload::new(), ctx)
    }

    /// Like `transition`, with extra payload on the recorded event.
    fn transition_noting(
        &self,
        instance: &mut TaskInstance,
        trigger: &str,
        extra: Payload,
        ctx: &mut StepContext<'_>,
    ) -> Result<(), TaskError> {
        let def = self
            .registry
            .get(&instance.task)
            .ok_or_else(|| TaskError::UnknownTask(instance.task.clone()))?;
        let Some(next) = def.next_state(&instance.state, trigger).map(str::to_string) else {
            let err = TaskError::IllegalTransition {
                task: instance.task.clone(),
                from: instance.state.clone(),
                trigger: trigger.to_string(),
            };
            self.fail(instance, &err.to_string(), ctx)?;
            return Err(err);
        };
        let from = std::mem::replace(&mut instance.state, next.clone());
        let mut p = extra;
        p.extend(payload([
            ("from", from.as_str()),
            ("to", next.as_str()),
            ("trigger", trigger),
            ("text", format!("{from} -> {next}").as_str()),
        ]));
        ctx.journal.record(Actor::System, EventKind::TaskStateChanged, p)?;
        instance.trace.push(TransitionRecord {
            from,
            trigger: trigger.to_string(),
            to: next,
        });
        Ok(())
    }

    /// Moves the instance to `Failed` outside the definition's transitions.
    fn fail(&self, instance: &mut TaskInstance, reason: &str, ctx: &mut StepContext<'_>) -> Result<(), TaskError> {
        warn!(instance = %instance.id, reason, "task failed");
        let from = std::mem::replace(&mut instance.state, state::FAILED.to_string());
        ctx.journal.record(
            Actor::System,
            EventKind::TaskStateChanged,
            payload([
                ("from", from.as_str()),
                ("to", state::FAILED),
                ("trigger", "error"),
                ("reason", reason),
                ("text", format!("{from} -> {}", state::FAILED).as_str()),
            ]),
        )?;
        Ok(())
    }

    /// Entry logic; loops through states that need no outside event.
    fn run(&self, instance: &mut TaskInstance, ctx: &mut StepContext<'_>, effects: &mut Vec<Effect>) -> Result<(), TaskError> {
        use state::*;
        loop {
            match instance.state.as_str() {
                CHECK_SLOTS => {
                    let missing = self.missing_slots(instance, &ctx.catalog.snapshot())?;
                    if missing.is_empty() {
                        instance.focus_slot = None;
                        self.transition(instance, trigger::SLOTS_COMPLETE, ctx)?;
                    } else if instance.round_trips >= self.max_round_trips {
                        self.transition(instance, trigger::CLARIFICATION_CAP, ctx)?;
                        effects.push(Effect::Failed {
                            reason: "clarification round-trips exhausted".into(),
                        });
                    } else {
                        instance.focus_slot = missing.first().cloned();
                        self.transition(instance, trigger::SLOTS_MISSING, ctx)?;
                    }
                }
                ASK_SENIOR_CLARIFICATION => {
                    self.ask_senior(instance, ctx, effects)?;
                    return Ok(());
                }
                NAVIGATE_TO_KITCHEN => {
                    instance.kitchen_trips += 1;
                    effects.push(Effect::Perform {
                        action: RobotAction::navigate(KITCHEN),
                    });
                    return Ok(());
                }
                REQUEST_ITEM => self.request_item(instance, ctx, effects)?,
                RECEIVE_ITEM => {
                    let request = instance.keeper_request();
                    effects.push(Effect::Perform {
                        action: RobotAction::PickUp {
                            item: request.item,
                            attrs: request.fills,
                        },
                    });
                    return Ok(());
                }
                NAVIGATE_TO_SENIOR => {
                    effects.push(Effect::Perform {
                        action: RobotAction::navigate(SENIOR_ROOM),
                    });
                    return Ok(());
                }
                DELIVER => {
                    effects.push(Effect::Perform {
                        action: RobotAction::Deliver,
                    });
                    return Ok(());
                }
                AWAIT_KEEPER_REPLY | DONE | FAILED => return Ok(()),
                other => {
                    let err = TaskError::IllegalTransition {
                        task: instance.task.clone(),
                        from: other.to_string(),
                        trigger: "enter".into(),
                    };
                    self.fail(instance, &err.to_string(), ctx)?;
                    return Err(err);
                }
            }
        }
    }

    fn ask_senior(&self, instance: &mut TaskInstance, ctx: &mut StepContext<'_>, effects: &mut Vec<Effect>) -> Result<(), TaskError> {
        let catalog = ctx.catalog.snapshot();
        let intent = catalog
            .intent(&instance.intent_name)
            .ok_or_else(|| TaskError::UnknownIntent(instance.intent_name.clone()))?;
        let slot = match instance.focus_slot.clone() {
            Some(s) => s,
            None => match self.missing_slots(instance, &catalog)?.into_iter().next() {
                Some(s) => s,
                None => return Ok(()),
            },
        };
        instance.focus_slot = Some(slot.clone());
        instance.round_trips += 1;
        let transcript = ctx.journal.transcript();
        let Interpretation::UtteranceGenerated { text } = self.lang.generate_clarifying_question(
            intent,
            &slot,
            &instance.slot_fills,
            &transcript,
            ctx.backend,
        )?
        else {
            unreachable!("question generation yields an utterance");
        };
        ctx.journal
            .record(Actor::Robot, EventKind::Said, payload([("text", text.as_str()), ("to", "senior")]))?;
        effects.push(Effect::Speak { to: Actor::Senior, text });
        Ok(())
    }

    fn request_item(&self, instance: &mut TaskInstance, ctx: &mut StepContext<'_>, effects: &mut Vec<Effect>) -> Result<(), TaskError> {
        let missing = self.missing_slots(instance, &ctx.catalog.snapshot())?;
        if !missing.is_empty() {
            let err = TaskError::IllegalTransition {
                task: instance.task.clone(),
                from: instance.state.clone(),
                trigger: format!("request with unfilled slots {missing:?}"),
            };
            self.fail(instance, &err.to_string(), ctx)?;
            return Err(err);
        }
        let transcript = ctx.journal.transcript();
        let Interpretation::UtteranceGenerated { text } = self.lang.generate_keeper_request(
            &instance.intent_name,
            &instance.slot_fills,
            &transcript,
            ctx.backend,
        )?
        else {
            unreachable!("request generation yields an utterance");
        };
        instance.pending_keeper_request = Some(text.clone());
        ctx.journal
            .record(Actor::Robot, EventKind::Said, payload([("text", text.as_str()), ("to", "keeper")]))?;
        effects.push(Effect::Speak { to: Actor::Keeper, text });
        self.transition(instance, trigger::REQUEST_SENT, ctx)
    }

    fn apply_answer(
        &self,
        instance: &mut TaskInstance,
        interpretation: Interpretation,
        catalog: &Catalog,
        ctx: &mut StepContext<'_>,
        effects: &mut Vec<Effect>,
    ) -> Result<(), TaskError> {
        let mut extra = Payload::new();
        if let Interpretation::IntentDetected {
            intent_name,
            slot_fills,
            dropped,
        } = interpretation
        {
            if !dropped.is_empty() {
                extra.insert("dropped".into(), describe_dropped(&dropped));
            }
            if normalize_name(&intent_name) == instance.intent_name {
                let intent = catalog
                    .intent(&instance.intent_name)
                    .ok_or_else(|| TaskError::UnknownIntent(instance.intent_name.clone()))?;
                for (slot, value) in restrict_fills(intent, slot_fills) {
                    instance.slot_fills.insert(slot, value);
                }
            }
        }
        self.transition_noting(instance, trigger::ANSWER, extra, ctx)?;
        self.run(instance, ctx, effects)
    }

    fn handle_reply(
        &self,
        instance: &mut TaskInstance,
        kind: ReplyKind,
        question: Option<String>,
        reply: &str,
        ctx: &mut StepContext<'_>,
        effects: &mut Vec<Effect>,
    ) -> Result<(), TaskError> {
        match kind {
            ReplyKind::Confirmation => {
                self.transition(instance, trigger::CONFIRMATION, ctx)?;
                self.run(instance, ctx, effects)
            }
            ReplyKind::Answer => self.transition(instance, trigger::ANSWER, ctx),
            ReplyKind::UnexpectedQuestion | ReplyKind::AvailabilityConstraint => {
                let asked = question.unwrap_or_else(|| reply.to_string());
                let catalog = ctx.catalog.snapshot();
                let transcript = ctx.journal.transcript();
                // Derive before leaving AwaitKeeperReply so a failed call leaves
                // the instance waiting for the keeper.
                let proposal = self.lang.derive_addition(
                    &asked,
                    Some(&instance.intent_name),
                    &instance.item(),
                    &catalog,
                    &transcript,
                    &instance.slot_fills,
                    ctx.backend,
                )?;
                let Interpretation::AdditionProposed { intent_name, slot, options } = proposal else {
                    unreachable!("derive_addition yields a proposal");
                };
                let (enter, leave) = if kind == ReplyKind::UnexpectedQuestion {
                    (trigger::UNEXPECTED_QUESTION, None)
                } else {
                    (trigger::AVAILABILITY_CONSTRAINT, Some(options.clone().unwrap_or_default()))
                };
                self.transition(instance, enter, ctx)?;
                self.learn(instance, &intent_name, slot, options, leave.clone(), ctx, effects)?;
                let missing = self.missing_slots(instance, &ctx.catalog.snapshot())?;
                let next = match (leave.is_some(), missing.is_empty()) {
                    (false, true) => trigger::LEARNED_NOTHING_MISSING,
                    (false, false) => trigger::LEARNED,
                    (true, true) => trigger::NO_CHOICE,
                    (true, false) => trigger::CHOICE_REQUIRED,
                };
                self.transition(instance, next, ctx)?;
                self.run(instance, ctx, effects)
            }
        }
    }

    /// Applies a proposal to the catalog, records what was learned and
    /// retargets the instance. `replace_options` is set for availability
    /// constraints, whose options replace the slot's option set.
    #[allow(clippy::too_many_arguments)]
    fn learn(
        &self,
        instance: &mut TaskInstance,
        intent_name: &str,
        mut slot: SlotSpec,
        options: Option<Vec<String>>,
        replace_options: Option<Vec<String>>,
        ctx: &mut StepContext<'_>,
        effects: &mut Vec<Effect>,
    ) -> Result<(), TaskError> {
        slot.required = true;
        if replace_options.is_none() {
            if let Some(opts) = &options {
                slot.options = crate::catalog::fold_options(slot.options.iter().chain(opts));
            }
        }
        let task = instance.task.clone();
        let item = instance.item();
        let result = ctx.catalog.update(|c| -> Result<Vec<LearnedChange>, CatalogError> {
            let mut changes = Vec::new();
            let intent = normalize_name(intent_name);
            if !c.contains(&intent) {
                let description = if item.is_empty() { String::new() } else { format!("bring {item}") };
                let spec = IntentSpec::learned(&intent, &description).with_slot(slot.clone());
                c.register_intent(spec, &task, &self.registry)?;
                changes.push(LearnedChange::Intent {
                    intent: intent.clone(),
                    task: task.clone(),
                });
                let stored = c.intent(&intent).and_then(|i| i.slot(&slot.name)).expect("slot was registered");
                changes.push(LearnedChange::Slot {
                    intent: intent.clone(),
                    slot: stored.name.clone(),
                    options: stored.options.clone(),
                });
            } else {
                let before = c.intent(&intent).and_then(|i| i.slot(&slot.name)).cloned();
                let after = c.add_slot(&intent, slot.clone())?.slot(&slot.name).cloned().expect("slot was added");
                if before.as_ref() != Some(&after) {
                    changes.push(LearnedChange::Slot {
                        intent: intent.clone(),
                        slot: after.name.clone(),
                        options: after.options.clone(),
                    });
                }
            }
            if let Some(opts) = &replace_options {
                let stored = c.set_slot_options(&intent, &slot.name, opts)?;
                changes.push(LearnedChange::Options {
                    intent: intent.clone(),
                    slot: stored.name.clone(),
                    options: stored.options.clone(),
                });
            }
            Ok(changes)
        });
        let changes = match result {
            Ok(c) => c,
            Err(e) => {
                self.fail(instance, &e.to_string(), ctx)?;
                return Err(TaskError::CatalogMutationFailed(e));
            }
        };
        for change in changes {
            let (kind, p) = match &change {
                LearnedChange::Intent { intent, task } => (
                    EventKind::IntentLearned,
                    payload([("intent", intent.as_str()), ("task", task.as_str()), ("text", intent.as_str())]),
                ),
                LearnedChange::Slot { intent, slot, options } => (
                    EventKind::SlotLearned,
                    payload([
                        ("intent", intent.clone()),
                        ("slot", slot.clone()),
                        ("options", options.join("|")),
                        ("text", format!("{intent}.{slot}")),
                    ]),
                ),
                LearnedChange::Options { intent, slot, options } => (
                    EventKind::OptionsLearned,
                    payload([
                        ("intent", intent.clone()),
                        ("slot", slot.clone()),
                        ("options", options.join("|")),
                        ("text", format!("{intent}.{slot} = {{{}}}", options.join(", "))),
                    ]),
                ),
            };
            ctx.journal.record(Actor::System, kind, p)?;
            effects.push(Effect::Learned { change });
        }

        let catalog = ctx.catalog.snapshot();
        let target = normalize_name(intent_name);
        let intent = catalog
            .intent(&target)
            .ok_or_else(|| TaskError::UnknownIntent(target.clone()))?;
        if target != instance.intent_name {
            debug!(from = %instance.intent_name, to = %target, "retargeting instance");
            instance.intent_name = target;
            instance.slot_fills = restrict_fills(intent, std::mem::take(&mut instance.slot_fills));
        }
        if replace_options.is_some() {
            let slot_spec = intent.slot(&slot.name).expect("slot exists after learning");
            if let Some(v) = instance.slot_fills.get(&slot_spec.name) {
                if !slot_spec.accepts(v) {
                    instance.slot_fills.remove(&slot_spec.name);
                }
            }
            if let [only] = slot_spec.options.as_slice() {
                instance.slot_fills.entry(slot_spec.name.clone()).or_insert_with(|| only.clone());
            }
        }
        Ok(())
    }
}

/// Fills limited to the intent's slots, with allowed values only.
fn restrict_fills(intent: &IntentSpec, fills: SlotFills) -> SlotFills {
    fills
        .into_iter()
        .filter_map(|(k, v)| {
            let slot = intent.slot(&k)?;
            let value = v.trim().to_lowercase();
            if value.is_empty() {
                return None;
            }
            if slot.options.is_empty() {
                Some((slot.name.clone(), value))
            } else {
                slot.canonical_option(&value).map(|c| (slot.name.clone(), c.to_string()))
            }
        })
        .collect()
}

fn describe_dropped(dropped: &[DroppedFill]) -> String {
    dropped.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn summarize(intent: &str, fills: &SlotFills) -> String {
    let mut s = intent.to_string();
    for (k, v) in fills {
        s.push_str(&format!(" {k}={v}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, BRING_GOODS_TASK};
    use crate::llm::BackendError;

    /// Backend that must never be called.
    struct Silent;

    impl CompletionBackend for Silent {
        fn complete(&self, prompt: &str) -> Result<String, BackendError> {
            panic!("unexpected backend call: {}", prompt.lines().next().unwrap_or(""))
        }

        fn identity(&self) -> &str {
            "silent"
        }
    }

    /// Answers every prompt with the same text.
    struct Fixed(&'static str);

    impl CompletionBackend for Fixed {
        fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
            Ok(self.0.to_string())
        }

        fn identity(&self) -> &str {
            "fixed"
        }
    }

    fn seeded() -> SharedCatalog {
        let mut c = Catalog::new();
        c.register_intent(
            IntentSpec::seeded("bring_goods", "").with_slot(SlotSpec::new("item", "")),
            BRING_GOODS_TASK,
            &[BRING_GOODS_TASK],
        )
        .unwrap();
        c.register_intent(
            IntentSpec::learned("bring_tea", "")
                .with_slot(SlotSpec::new("blackOrGreen", "").with_options(["black", "green"]))
                .with_slot(SlotSpec::new("sugar", "").with_options(["yes", "no"]))
                .with_slot(SlotSpec::new("lemon", "").with_options(["yes", "no"])),
            BRING_GOODS_TASK,
            &[BRING_GOODS_TASK],
        )
        .unwrap();
        SharedCatalog::new(c)
    }

    struct Harness {
        store: ContextStore,
        session: SessionId,
        catalog: SharedCatalog,
        runtime: TaskRuntime,
    }

    impl Harness {
        fn new() -> Self {
            let store = ContextStore::new();
            let session = SessionId::from("s");
            store.create_session(session.clone()).unwrap();
            Self {
                store,
                session,
                catalog: seeded(),
                runtime: TaskRuntime::default(),
            }
        }

        fn with<R>(&self, backend: &dyn CompletionBackend, f: impl FnOnce(&TaskRuntime, &mut StepContext<'_>) -> R) -> R {
            let mut journal = SessionJournal::new(&self.store, &self.session, 40);
            let mut ctx = StepContext {
                catalog: &self.catalog,
                backend,
                journal: &mut journal,
            };
            f(&self.runtime, &mut ctx)
        }
    }

    #[test]
    fn dispatch_starts_in_check_slots() {
        let h = Harness::new();
        let fills = SlotFills::from([("item".into(), "juice".into())]);
        let inst = h.with(&Silent, |rt, ctx| rt.dispatch("bring_goods", fills, &[], &h.session, ctx)).unwrap();
        assert_eq!(inst.state, state::CHECK_SLOTS);
        let events = h.store.events(&h.session, 1).unwrap();
        assert_eq!(events[0].kind, EventKind::TaskStarted);
    }

    #[test]
    fn dispatch_unbound_intent() {
        let h = Harness::new();
        let err = h
            .with(&Silent, |rt, ctx| rt.dispatch("sing_song", SlotFills::new(), &[], &h.session, ctx))
            .unwrap_err();
        assert!(matches!(err, TaskError::NoBinding(_)));
    }

    #[test]
    fn complete_request_goes_straight_to_kitchen() {
        let h = Harness::new();
        let fills = SlotFills::from([("item".into(), "juice".into())]);
        let (inst, effects) = h.with(&Silent, |rt, ctx| {
            let mut inst = rt.dispatch("bring_goods", fills, &[], &h.session, ctx).unwrap();
            let effects = rt.start(&mut inst, ctx).unwrap();
            (inst, effects)
        });
        assert_eq!(inst.state, state::NAVIGATE_TO_KITCHEN);
        assert_eq!(effects, [Effect::Perform { action: RobotAction::navigate(KITCHEN) }]);
    }

    #[test]
    fn missing_slots_in_catalog_order() {
        let h = Harness::new();
        let fills = SlotFills::from([("sugar".into(), "yes".into())]);
        let inst = h.with(&Silent, |rt, ctx| rt.dispatch("bring_tea", fills, &[], &h.session, ctx)).unwrap();
        let missing = h.runtime.missing_slots(&inst, &h.catalog.snapshot()).unwrap();
        assert_eq!(missing, ["blackorgreen", "lemon"]);
    }

    #[test]
    fn irrelevant_event_is_ignored() {
        let h = Harness::new();
        let fills = SlotFills::from([("item".into(), "juice".into())]);
        let effects = h.with(&Silent, |rt, ctx| {
            let mut inst = rt.dispatch("bring_goods", fills, &[], &h.session, ctx).unwrap();
            rt.start(&mut inst, ctx).unwrap();
            rt.advance(&mut inst, EngineEvent::ActionFinished { action: RobotAction::Deliver }, ctx)
                .unwrap()
        });
        assert_eq!(effects, [Effect::Ignored]);
    }

    #[test]
    fn illegal_transition_fails_the_instance() {
        let mut h = Harness::new();
        let mut def = crate::runtime::bring_goods_task();
        def.transitions.retain(|t| t.trigger != trigger::ARRIVED);
        let mut registry = TaskRegistry::new();
        registry.register_task(def).unwrap();
        h.runtime = TaskRuntime::new(registry);
        let fills = SlotFills::from([("item".into(), "juice".into())]);
        let (inst, err) = h.with(&Silent, |rt, ctx| {
            let mut inst = rt.dispatch("bring_goods", fills, &[], &h.session, ctx).unwrap();
            rt.start(&mut inst, ctx).unwrap();
            let err = rt
                .advance(
                    &mut inst,
                    EngineEvent::ActionFinished { action: RobotAction::navigate(KITCHEN) },
                    ctx,
                )
                .unwrap_err();
            (inst, err)
        });
        assert!(matches!(err, TaskError::IllegalTransition { .. }));
        assert_eq!(inst.state, state::FAILED);
    }

    #[test]
    fn interpreted_answer_fills_slot_and_rejects_bad_option() {
        let h = Harness::new();
        let backend = Fixed(r#"{"text":"Black or green?"}"#);
        let inst = h.with(&backend, |rt, ctx| {
            let mut inst = rt.dispatch("bring_tea", SlotFills::new(), &[], &h.session, ctx).unwrap();
            rt.start(&mut inst, ctx).unwrap();
            assert_eq!(inst.state, state::ASK_SENIOR_CLARIFICATION);
            assert_eq!(inst.focus_slot.as_deref(), Some("blackorgreen"));
            let answer = Interpretation::IntentDetected {
                intent_name: "bring_tea".into(),
                slot_fills: SlotFills::from([
                    ("blackorgreen".into(), "GREEN".into()),
                    ("sugar".into(), "maybe".into()),
                ]),
                dropped: vec![],
            };
            rt.advance(&mut inst, EngineEvent::InterpretationReady { interpretation: answer }, ctx)
                .unwrap();
            inst
        });
        assert_eq!(inst.slot_fills, SlotFills::from([("blackorgreen".into(), "green".into())]));
        assert_eq!(inst.state, state::ASK_SENIOR_CLARIFICATION);
        assert_eq!(inst.focus_slot.as_deref(), Some("sugar"));
        assert_eq!(inst.round_trips, 2);
    }

    #[test]
    fn clarification_cap_fails_instance() {
        let h = Harness::new();
        let runtime = TaskRuntime::default().with_max_round_trips(2);
        let backend = Fixed(r#"{"text":"Which?"}"#);
        let inst = h.with(&backend, |_, ctx| {
            let mut inst = runtime.dispatch("bring_tea", SlotFills::new(), &[], &h.session, ctx).unwrap();
            runtime.start(&mut inst, ctx).unwrap();
            for _ in 0..2 {
                runtime
                    .advance(
                        &mut inst,
                        EngineEvent::InterpretationReady { interpretation: Interpretation::Unknown },
                        ctx,
                    )
                    .unwrap();
            }
            inst
        });
        assert_eq!(inst.state, state::FAILED);
        assert_eq!(inst.round_trips, 2);
    }
}

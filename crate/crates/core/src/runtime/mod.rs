//! Task executive: the task repository and the bring-goods state machine
//! that runs the learn, clarify and retry loop.

mod engine;
mod taskdef;

use thiserror::Error;

pub use engine::{
    Effect, EngineEvent, Journal, LearnedChange, SessionJournal, StepContext, TaskInstance, TaskRuntime,
    TransitionRecord, DEFAULT_MAX_ROUND_TRIPS,
};
pub use taskdef::{bring_goods_task, state, trigger, TaskDef, TaskRegistry, Transition};

use crate::catalog::CatalogError;
use crate::context::ContextError;
use crate::llm::LlmError;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    NoBinding(CatalogError),
    #[error("task `{0}` is not registered")]
    UnknownTask(String),
    #[error("task `{0}` is already registered")]
    DuplicateTask(String),
    #[error("invalid task definition: {0}")]
    InvalidDef(String),
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error("illegal transition from `{from}` on `{trigger}` in task `{task}`")]
    IllegalTransition {
        task: String,
        from: String,
        trigger: String,
    },
    #[error("catalog mutation failed: {0}")]
    CatalogMutationFailed(CatalogError),
    #[error(transparent)]
    Language(#[from] LlmError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

//! Language processing: prompt templates, completion backends, envelope
//! parsing and the typed interpretations the task runtime consumes.

mod backend;
mod envelope;
mod grounding;
mod processor;
mod scripted;
pub mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendError, CompletionBackend, RemoteBackend, RemoteConfig, DEFAULT_REMOTE_TIMEOUT, ENV_API_KEY,
    ENV_BASE_URL, ENV_MODEL,
};
pub use envelope::parse_envelope;
pub use grounding::{grounding_filter, DropReason, DroppedFill, Grounded, SlotFills};
pub use processor::{item_of, Focus, LanguageProcessor};
pub use scripted::{RuleError, ScriptedBackend};
pub use template::TemplateId;

use crate::catalog::SlotSpec;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template placeholder `{{{0}}}` is not bound")]
    MissingPlaceholder(String),
    #[error("malformed completion: {0}")]
    MalformedCompletion(String),
    #[error("backend failure: {0}")]
    BackendFailure(#[from] BackendError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Answer,
    UnexpectedQuestion,
    AvailabilityConstraint,
    Confirmation,
}

impl ReplyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplyKind::Answer => "answer",
            ReplyKind::UnexpectedQuestion => "unexpected_question",
            ReplyKind::AvailabilityConstraint => "availability_constraint",
            ReplyKind::Confirmation => "confirmation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
            "answer" => Some(ReplyKind::Answer),
            "unexpected_question" => Some(ReplyKind::UnexpectedQuestion),
            "availability_constraint" => Some(ReplyKind::AvailabilityConstraint),
            "confirmation" => Some(ReplyKind::Confirmation),
            _ => None,
        }
    }
}

/// Typed result of one language-backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Interpretation {
    IntentDetected {
        intent_name: String,
        slot_fills: SlotFills,
        /// Fills removed by the grounding filter.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        dropped: Vec<DroppedFill>,
    },
    Unknown,
    ReplyClassified {
        kind: ReplyKind,
        question_text: Option<String>,
    },
    AdditionProposed {
        intent_name: String,
        slot: SlotSpec,
        options: Option<Vec<String>>,
    },
    UtteranceGenerated {
        text: String,
    },
}

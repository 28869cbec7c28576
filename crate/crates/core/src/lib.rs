//! Conversational care-home robot that learns new intents, slots and slot
//! options from dialogue with a senior and a kitchen keeper.

pub mod catalog;
pub mod context;
pub mod llm;
pub mod runtime;
pub mod world;
pub mod bus;
pub mod gateway;

pub use catalog::{Catalog, CatalogError, IntentSpec, SharedCatalog, SlotSpec};
pub use context::{Actor, ContextEvent, ContextStore, EventKind, SessionId};
pub use gateway::{Awaiting, Gateway, GatewayError, KeeperMode, SessionInfo};
pub use runtime::{TaskInstance, TaskRegistry, TaskRuntime};
pub use world::{WorldConfig, WorldState};

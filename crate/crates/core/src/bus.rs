//! In-process publish/subscribe bus. Messages for one session and topic are
//! delivered to each subscriber in publish order.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::context::{ContextEvent, EventKind, SessionId};

pub mod topic {
    pub const UTTERANCES_IN: &str = "utterances.in";
    pub const UTTERANCES_OUT: &str = "utterances.out";
    pub const ACTIONS: &str = "actions";
    pub const EVENTS: &str = "events";
    /// Published once when a session is closed; the payload is empty.
    pub const SESSION_CLOSED: &str = "session.closed";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusMessage {
    pub topic: String,
    pub session: SessionId,
    /// Serialized event.
    pub payload: String,
}

impl BusMessage {
    pub fn event(&self) -> Option<ContextEvent> {
        serde_json::from_str(&self.payload).ok()
    }
}

struct Subscriber {
    topics: Option<Vec<String>>,
    session: Option<SessionId>,
    tx: Sender<BusMessage>,
}

impl Subscriber {
    fn wants(&self, msg: &BusMessage) -> bool {
        self.session.as_ref().is_none_or(|s| *s == msg.session)
            && self.topics.as_ref().is_none_or(|t| t.contains(&msg.topic))
    }
}

#[derive(Default)]
pub struct Bus {
    subscribers: Mutex<Vec<Subscriber>>,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.subscribers.lock().map(|s| s.len()).unwrap_or(0);
        f.debug_struct("Bus").field("subscribers", &n).finish()
    }
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subscribes to `topics` (all when `None`) of `session` (all when `None`).
    pub fn subscribe(&self, topics: Option<&[&str]>, session: Option<&SessionId>) -> Receiver<BusMessage> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.lock().unwrap().push(Subscriber {
            topics: topics.map(|t| t.iter().map(|s| s.to_string()).collect()),
            session: session.cloned(),
            tx,
        });
        rx
    }

    pub fn publish(&self, msg: BusMessage) {
        let mut subs = self.subscribers.lock().unwrap();
        subs.retain(|s| !s.wants(&msg) || s.tx.send(msg.clone()).is_ok());
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().unwrap().len()
    }

    /// Publishes a context event on `events` and on its specific topic.
    pub fn publish_event(&self, session: &SessionId, event: &ContextEvent) {
        let payload = serde_json::to_string(event).expect("event serializes");
        let specific = match event.kind {
            EventKind::Heard => Some(topic::UTTERANCES_IN),
            EventKind::Said => Some(topic::UTTERANCES_OUT),
            EventKind::ActionPerformed => Some(topic::ACTIONS),
            _ => None,
        };
        for t in specific.into_iter().chain([topic::EVENTS]) {
            self.publish(BusMessage {
                topic: t.to_string(),
                session: session.clone(),
                payload: payload.clone(),
            });
        }
    }
}

use std::path::Path;
use std::time::Duration;

use carebot_core::context::{Actor, ContextEvent};
use carebot_core::gateway::KeeperMode;
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Api { status: u16, message: String },
}

/// Blocking client for the HTTP service.
pub struct HttpClient {
    base: String,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Created {
    session_id: String,
}

#[derive(Deserialize)]
struct Posted {
    events: Vec<ContextEvent>,
}

impl HttpClient {
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            http,
        })
    }

    fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().unwrap_or_default();
        let message = serde_json::from_str::<Value>(&body)
            .ok()
            .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_string))
            .unwrap_or(body);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    pub fn create_session(&self, mode: KeeperMode, backend: &str, world: Option<&Path>) -> Result<String, ClientError> {
        let mut body = json!({"mode": mode, "backend": backend});
        if let Some(w) = world {
            body["world"] = json!(w);
        }
        let resp = self.http.post(format!("{}/sessions", self.base)).json(&body).send()?;
        Ok(Self::check(resp)?.json::<Created>()?.session_id)
    }

    pub fn post_utterance(&self, session: &str, actor: Actor, text: &str) -> Result<Vec<ContextEvent>, ClientError> {
        let resp = self
            .http
            .post(format!("{}/sessions/{session}/utterances", self.base))
            .json(&json!({"actor": actor, "text": text}))
            .send()?;
        Ok(Self::check(resp)?.json::<Posted>()?.events)
    }

    pub fn catalog(&self) -> Result<String, ClientError> {
        let resp = self.http.get(format!("{}/catalog", self.base)).send()?;
        Ok(Self::check(resp)?.text()?)
    }

    pub fn session(&self, session: &str) -> Result<Value, ClientError> {
        let resp = self.http.get(format!("{}/sessions/{session}", self.base)).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    pub fn close(&self, session: &str) -> Result<(), ClientError> {
        let resp = self.http.delete(format!("{}/sessions/{session}", self.base)).send()?;
        Self::check(resp)?;
        Ok(())
    }
}

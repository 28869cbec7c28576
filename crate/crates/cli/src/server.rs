//! HTTP front end of the gateway.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use carebot_core::context::{Actor, SessionId};
use carebot_core::gateway::{GatewayError, KeeperMode, StreamItem};
use carebot_core::world::WorldConfig;
use carebot_core::Gateway;
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::mpsc;
use tracing::debug;

#[derive(Clone)]
struct AppState {
    gw: Arc<Gateway>,
    default_backend: String,
}

pub fn router(gw: Arc<Gateway>, default_backend: &str) -> Router {
    let state = AppState {
        gw,
        default_backend: default_backend.to_string(),
    };
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(close_session))
        .route("/sessions/{id}/utterances", post(post_utterance))
        .route("/sessions/{id}/events", get(events))
        .route("/catalog", get(catalog))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, gw: Arc<Gateway>, default_backend: &str) -> std::io::Result<()> {
    axum::serve(listener, router(gw, default_backend)).await
}

struct ApiError {
    status: StatusCode,
    message: String,
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::UnknownSession(_) => StatusCode::NOT_FOUND,
            GatewayError::ActorNotAllowed { .. } => StatusCode::FORBIDDEN,
            GatewayError::SessionClosed(_) => StatusCode::CONFLICT,
            GatewayError::BackendUnavailable(_) | GatewayError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            GatewayError::BackendFailure(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

fn bad_request(message: impl ToString) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        message: message.to_string(),
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
    }
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    mode: Option<KeeperMode>,
    backend: Option<String>,
    world: Option<PathBuf>,
}

async fn create_session(
    State(st): State<AppState>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let world = match &req.world {
        Some(path) => Some(WorldConfig::load(path).map_err(bad_request)?),
        None => None,
    };
    let backend = req.backend.unwrap_or(st.default_backend);
    let mode = req.mode.unwrap_or(KeeperMode::ScriptedKeeper);
    let info = st.gw.create_session(mode, world, &backend)?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": info.id, "session": info}))))
}

#[derive(Debug, Deserialize)]
struct PostUtterance {
    actor: Actor,
    text: String,
}

async fn post_utterance(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<PostUtterance>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let gw = st.gw.clone();
    let events = tokio::task::spawn_blocking(move || gw.post_utterance(&SessionId::from(id.as_str()), req.actor, &req.text))
        .await
        .map_err(join_error)??;
    Ok(Json(json!({"events": events})))
}

async fn session_info(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let info = st.gw.session_info(&SessionId::from(id.as_str()))?;
    Ok(Json(json!({
        "id": info.id,
        "status": info.status,
        "mode": info.mode,
        "backend": info.backend,
        "awaiting": info.awaiting,
        "robot_location": info.world.robot_location,
        "carried_item": info.world.carried_item,
        "task_state": info.task.as_ref().map(|t| t.state.clone()),
        "task": info.task,
        "finished_tasks": info.finished_tasks,
    })))
}

async fn close_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    st.gw.close_session(&SessionId::from(id.as_str()))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn catalog(State(st): State<AppState>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], st.gw.catalog_snapshot())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    from: Option<u64>,
}

/// Server-sent events: one JSON event per message, `id` set to its seq, and
/// a final `end` event once the session is closed.
async fn events(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let mut stream = st.gw.stream_events(&SessionId::from(id.as_str()), q.from.unwrap_or(1))?;
    let (tx, rx) = mpsc::channel::<Event>(64);
    tokio::task::spawn_blocking(move || loop {
        let item = stream.next_timeout(Duration::from_millis(500));
        let end = matches!(item, Some(StreamItem::End));
        let event = match item {
            Some(StreamItem::Event(e)) => {
                let data = serde_json::to_string(&e).expect("event serializes");
                Event::default().id(e.seq.to_string()).data(data)
            }
            Some(StreamItem::End) => Event::default().event("end").data("{}"),
            None if tx.is_closed() => break,
            None => continue,
        };
        if tx.blocking_send(event).is_err() || end {
            debug!("event stream finished");
            break;
        }
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (Ok(e), rx)) });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

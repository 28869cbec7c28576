use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use carebot_cli::client::{ClientError, HttpClient};
use carebot_cli::server;
use carebot_cli::setup::{build_gateway, EngineOptions, SCRIPTED};
use carebot_core::catalog::Catalog;
use carebot_core::context::{Actor, ContextEvent, EventKind};
use carebot_core::gateway::KeeperMode;
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Service {
    url: String,
    _dir: tempfile::TempDir,
    catalog: PathBuf,
}

fn start() -> Service {
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("catalog.json");
    let gw = build_gateway(&EngineOptions {
        catalog: catalog.clone(),
        world: root().join("config/carehome.json"),
        rules: Some(root().join("config/carehome.rules.json")),
        tasks: None,
    })
    .unwrap();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            server::serve(listener, Arc::new(gw), SCRIPTED).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    Service {
        url: format!("http://{addr}"),
        _dir: dir,
        catalog,
    }
}

fn lines(events: &[ContextEvent]) -> Vec<String> {
    events.iter().map(ContextEvent::transcript_line).collect()
}

#[test]
fn juice_errand_over_http() {
    let svc = start();
    let client = HttpClient::new(&svc.url).unwrap();
    let id = client.create_session(KeeperMode::ScriptedKeeper, SCRIPTED, None).unwrap();
    let first = client.post_utterance(&id, Actor::Senior, "Bring me a juice, please.").unwrap();
    assert_eq!(first[0].seq, 1);
    assert_eq!(lines(&first).last().unwrap(), "[robot] Said: What kind of juice would you like?");

    let info = client.session(&id).unwrap();
    assert_eq!(info["awaiting"], "senior");
    assert_eq!(info["robot_location"], "senior_room");
    assert_eq!(info["task_state"], "AskSeniorClarification");

    let catalog = Catalog::from_json(&client.catalog().unwrap()).unwrap();
    assert!(catalog.intent("bring_juice").unwrap().has_slot("which"));
    assert_eq!(std::fs::read_to_string(&svc.catalog).unwrap(), catalog.to_canonical_json());

    let rest = client.post_utterance(&id, Actor::Senior, "Apple juice").unwrap();
    assert_eq!(rest[0].seq, first.len() as u64 + 1);
    assert_eq!(lines(&rest).last().unwrap(), "[system] TaskCompleted: bring_juice which=apple");
    assert_eq!(client.session(&id).unwrap()["finished_tasks"].as_array().unwrap().len(), 1);
}

#[test]
fn api_errors_map_to_status_codes() {
    let svc = start();
    let client = HttpClient::new(&svc.url).unwrap();
    let status = |e: ClientError| match e {
        ClientError::Api { status, .. } => status,
        other => panic!("{other}"),
    };
    assert_eq!(status(client.session("nope").unwrap_err()), 404);
    assert_eq!(status(client.create_session(KeeperMode::ScriptedKeeper, "remote", None).unwrap_err()), 400);
    let id = client.create_session(KeeperMode::ScriptedKeeper, SCRIPTED, None).unwrap();
    assert_eq!(status(client.post_utterance(&id, Actor::Keeper, "Which juice?").unwrap_err()), 403);
    client.close(&id).unwrap();
    assert_eq!(status(client.post_utterance(&id, Actor::Senior, "hi").unwrap_err()), 409);

    let raw = reqwest::blocking::Client::new()
        .post(format!("{}/sessions/{id}/utterances", svc.url))
        .json(&serde_json::json!({"actor": "robot"}))
        .send()
        .unwrap();
    assert!(raw.status().is_client_error());
}

#[test]
fn human_keeper_session_waits_for_the_keeper() {
    let svc = start();
    let client = HttpClient::new(&svc.url).unwrap();
    let id = client.create_session(KeeperMode::HumanKeeper, SCRIPTED, None).unwrap();
    client.post_utterance(&id, Actor::Senior, "Bring me a coffee.").unwrap();
    assert_eq!(client.session(&id).unwrap()["awaiting"], "keeper");
    let events = client.post_utterance(&id, Actor::Keeper, "We only have black coffee.").unwrap();
    assert!(lines(&events).contains(&"[system] OptionsLearned: bring_coffee.type = {black}".to_string()));
}

/// Reads SSE frames until the `end` event; returns the data of each event.
fn read_sse(url: &str) -> (Vec<(Option<String>, String)>, bool) {
    let resp = reqwest::blocking::Client::new().get(url).send().unwrap();
    assert_eq!(resp.status(), 200);
    let mut frames = Vec::new();
    let (mut id, mut event, mut data) = (None, None, String::new());
    for line in BufReader::new(resp).lines() {
        let line = line.unwrap();
        if line.is_empty() {
            if event.as_deref() == Some("end") {
                return (frames, true);
            }
            if !data.is_empty() {
                frames.push((id.take(), std::mem::take(&mut data)));
            }
            event = None;
            continue;
        }
        if let Some(v) = line.strip_prefix("id:") {
            id = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("event:") {
            event = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("data:") {
            data.push_str(v.trim_start());
        }
    }
    (frames, false)
}

#[test]
fn event_stream_replays_history_and_ends_on_close() {
    let svc = start();
    let client = HttpClient::new(&svc.url).unwrap();
    let id = client.create_session(KeeperMode::ScriptedKeeper, SCRIPTED, None).unwrap();
    let posted = client.post_utterance(&id, Actor::Senior, "Bring me a juice, please.").unwrap();

    let url = format!("{}/sessions/{id}/events?from=3", svc.url);
    let reader = std::thread::spawn(move || read_sse(&url));
    std::thread::sleep(std::time::Duration::from_millis(300));
    let more = client.post_utterance(&id, Actor::Senior, "Orange juice").unwrap();
    client.close(&id).unwrap();
    let (frames, ended) = reader.join().unwrap();
    assert!(ended);

    let events: Vec<ContextEvent> = frames.iter().map(|(_, d)| serde_json::from_str(d).unwrap()).collect();
    let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
    let last = more.last().unwrap().seq;
    assert_eq!(seqs, (3..=last).collect::<Vec<_>>());
    assert!(frames.iter().all(|(id, d)| {
        let e: Value = serde_json::from_str(d).unwrap();
        id.as_deref() == Some(e["seq"].to_string().as_str())
    }));
    assert_eq!(events[0], posted[2]);
    assert_eq!(events.last().unwrap().kind, EventKind::TaskCompleted);
}

#[test]
fn scenario_runs_against_the_service() {
    let svc = start();
    let run = Command::new(env!("CARGO_BIN_EXE_carebot"))
        .args(["run", "scenarios/juice_learning", "--connect", &svc.url])
        .current_dir(root())
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stdout));

    let restart = Command::new(env!("CARGO_BIN_EXE_carebot"))
        .args(["run", "scenarios/tea_attributes", "--connect", &svc.url])
        .current_dir(root())
        .output()
        .unwrap();
    assert_eq!(restart.status.code(), Some(2));

    let dump = Command::new(env!("CARGO_BIN_EXE_carebot"))
        .args(["dump-catalog", "--connect", &svc.url])
        .output()
        .unwrap();
    assert_eq!(dump.status.code(), Some(0));
    assert_eq!(
        String::from_utf8(dump.stdout).unwrap(),
        std::fs::read_to_string(&svc.catalog).unwrap()
    );
}

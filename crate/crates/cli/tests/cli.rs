use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn carebot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carebot"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_scenarios_pass() {
    for name in ["juice_learning", "tea_attributes", "coffee_options", "unknown_request"] {
        let out = carebot(&["run", &format!("scenarios/{name}")]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stdout(&out));
        assert!(stdout(&out).contains("passed:"));
    }
}

#[test]
fn second_juice_run_needs_the_learned_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let cat = dir.path().join("catalog.json");
    let fresh = carebot(&["run", "scenarios/juice_second_run.scenario.json", "--catalog", s(&cat)]);
    assert_eq!(fresh.status.code(), Some(1), "{}", stdout(&fresh));

    let other = dir.path().join("other.json");
    assert_eq!(carebot(&["run", "scenarios/juice_learning", "--catalog", s(&other)]).status.code(), Some(0));
    let again = carebot(&["run", "scenarios/juice_second_run", "--catalog", s(&other)]);
    assert_eq!(again.status.code(), Some(0), "{}", stdout(&again));
}

#[test]
fn failed_expectation_exits_one_and_bad_script_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = root().join("config");
    let failing = dir.path().join("fail.scenario.json");
    std::fs::write(
        &failing,
        serde_json::json!({
            "name": "fail",
            "rules": config.join("carehome.rules.json"),
            "world": config.join("carehome.json"),
            "steps": [{"actor": "senior", "text": "Sing me a song."}],
            "expectations": [{"event": {"kind": "TaskStarted"}}]
        })
        .to_string(),
    )
    .unwrap();
    let out = carebot(&["run", s(&failing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));

    let keeper = dir.path().join("keeper.scenario.json");
    std::fs::write(
        &keeper,
        serde_json::json!({
            "name": "keeper",
            "rules": config.join("carehome.rules.json"),
            "world": config.join("carehome.json"),
            "steps": [{"actor": "keeper", "text": "Which juice?"}],
            "expectations": []
        })
        .to_string(),
    )
    .unwrap();
    assert_eq!(carebot(&["run", s(&keeper)]).status.code(), Some(2));

    let broken = dir.path().join("broken.scenario.json");
    std::fs::write(&broken, "{\"name\": ").unwrap();
    assert_eq!(carebot(&["run", s(&broken)]).status.code(), Some(2));
    assert_eq!(carebot(&["run", "scenarios/does_not_exist"]).status.code(), Some(2));
}

#[test]
fn exported_log_replays_to_the_same_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("juice.ndjson");
    let run = carebot(&["run", "scenarios/juice_learning", "--transcript", "--export-log", s(&log)]);
    assert_eq!(run.status.code(), Some(0));
    let transcript: Vec<String> = stdout(&run)
        .lines()
        .take_while(|l| !l.starts_with("scenario "))
        .map(str::to_string)
        .collect();
    let replay = carebot(&["replay", s(&log)]);
    assert_eq!(replay.status.code(), Some(0));
    let replayed: Vec<String> = stdout(&replay).lines().map(str::to_string).collect();
    assert_eq!(replayed, transcript);
    assert_eq!(replayed[0], "[senior] Heard: Bring me a juice, please.");

    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{not json}\n");
    let corrupt = dir.path().join("corrupt.ndjson");
    std::fs::write(&corrupt, text).unwrap();
    let out = carebot(&["replay", s(&corrupt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 32"));

    let empty = dir.path().join("empty.ndjson");
    std::fs::write(&empty, "").unwrap();
    let out = carebot(&["replay", s(&empty)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
}

#[test]
fn dump_catalog_is_canonical() {
    let seed = carebot(&["dump-catalog", "--seed"]);
    assert_eq!(seed.status.code(), Some(0));
    assert_eq!(stdout(&seed), std::fs::read_to_string(root().join("config/seed_catalog.json")).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let messy = dir.path().join("messy.json");
    let value: serde_json::Value = serde_json::from_str(&stdout(&seed)).unwrap();
    std::fs::write(&messy, serde_json::to_string(&value).unwrap()).unwrap();
    let out = carebot(&["dump-catalog", "--file", s(&messy)]);
    assert_eq!(stdout(&out), stdout(&seed));

    std::fs::write(&messy, "[]").unwrap();
    assert_eq!(carebot(&["dump-catalog", "--file", s(&messy)]).status.code(), Some(2));
    assert_eq!(carebot(&["dump-catalog"]).status.code(), Some(2));
}

#[test]
fn impossible_expectation_is_named_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = root().join("config");
    let script = dir.path().join("never.scenario.json");
    std::fs::write(
        &script,
        serde_json::json!({
            "name": "never",
            "rules": config.join("carehome.rules.json"),
            "world": config.join("carehome.json"),
            "steps": [{"actor": "senior", "text": "Bring me a juice, please."}],
            "expectations": [
                {"event": {"kind": "TaskStarted"}},
                {"catalog": {"intent": "bring_pizza"}}
            ]
        })
        .to_string(),
    )
    .unwrap();
    let out = carebot(&["run", s(&script)]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("PASS event TaskStarted"));
    assert!(text.lines().any(|l| l.starts_with("FAIL catalog has bring_pizza")), "{text}");
}

#[test]
fn scripted_runs_are_reproducible() {
    let first = carebot(&["run", "scenarios/tea_attributes", "--json"]);
    let second = carebot(&["run", "scenarios/tea_attributes", "--json"]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(stdout(&first), stdout(&second));
    let report: serde_json::Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert_eq!(report["scenario"], "tea_attributes");
}

#[test]
fn world_flag_overrides_the_scenario_world() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.json");
    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("config/carehome.json")).unwrap()).unwrap();
    config["items"]["juice"][0]["question"] = "Apple or orange juice?".into();
    std::fs::write(&world, config.to_string()).unwrap();
    let out = carebot(&["run", "scenarios/juice_learning", "--world", s(&world), "--transcript"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("[keeper] Heard: Apple or orange juice?"));
    assert!(stdout(&out).contains("[system] SlotLearned: bring_juice.appleororange"));
}

/// Line diff by longest common subsequence: (removed, added).
fn line_diff<'a>(before: &'a str, after: &'a str) -> (Vec<&'a str>, Vec<&'a str>) {
    let a: Vec<&str> = before.lines().collect();
    let b: Vec<&str> = after.lines().collect();
    let mut lcs = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let (mut removed, mut added) = (Vec::new(), Vec::new());
    while i < a.len() || j < b.len() {
        if i < a.len() && j < b.len() && a[i] == b[j] {
            i += 1;
            j += 1;
        } else if j < b.len() && (i == a.len() || lcs[i][j + 1] >= lcs[i + 1][j]) {
            added.push(b[j]);
            j += 1;
        } else {
            removed.push(a[i]);
            i += 1;
        }
    }
    (removed, added)
}

#[test]
fn learning_only_adds_to_the_dumped_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let cat = dir.path().join("catalog.json");
    let mut dumps = vec![stdout(&carebot(&["dump-catalog", "--seed"]))];
    for name in ["juice_learning", "tea_attributes", "coffee_options"] {
        assert_eq!(carebot(&["run", &format!("scenarios/{name}"), "--catalog", s(&cat)]).status.code(), Some(0));
        dumps.push(stdout(&carebot(&["dump-catalog", "--file", s(&cat)])));
    }
    for pair in dumps.windows(2) {
        let (removed, added) = line_diff(&pair[0], &pair[1]);
        assert!(!added.is_empty());
        // The creation counter moves and a closing brace gains a separator;
        // nothing else may disappear.
        for line in removed {
            let t = line.trim();
            let counter = t.starts_with("\"next_seq\":");
            let separator = added.iter().any(|a| a.trim() == format!("{t},"));
            assert!(counter || separator, "removed line {line:?}");
        }
    }
}

#[test]
fn failed_step_keeps_its_events_in_the_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.json");
    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("config/carehome.json")).unwrap()).unwrap();
    // No rule understands this question, so the step fails mid-errand.
    config["items"]["juice"][0]["question"] = "Apple or orange?".into();
    std::fs::write(&world, config.to_string()).unwrap();
    let out = carebot(&["run", "scenarios/juice_learning", "--world", s(&world), "--transcript"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("ERROR step 1"), "{text}");
    assert!(text.contains("[keeper] Heard: Apple or orange?"), "{text}");
}

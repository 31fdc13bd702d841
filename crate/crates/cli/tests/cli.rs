mod support;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::Command;

use scene_elab::runs::{Registry, RunManifest};
use scene_elab::tasks::RatingTask;
use scene_elab_cli::serve::{handle, parse_batch, serve};
use support::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scene-elab"))
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("build-corpus"));
}

#[test]
fn missing_file_is_reported_as_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = bin()
        .args(["--runs-dir", &p(dir.path()), "score", "--audit", &p(&missing)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert_eq!(err["error"]["path"], p(&missing));
    assert!(err["error"]["message"].as_str().unwrap().contains("missing.jsonl"));
}

#[test]
fn unknown_command_and_bad_flags_exit_two() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "unknown_command");

    let out = bin().args(["score", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn pipeline_links_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let se = p(&dir.path().join("se.jsonl"));
    let audit = p(&dir.path().join("audit.jsonl"));
    let bench = siqa_args();

    let mut args = vec!["elaborate".to_string()];
    args.extend(bench.clone());
    args.extend(["--out".into(), se.clone()]);
    let elab = stub_run(&runs, &strs(&args)).unwrap();
    assert_eq!(elab.summary["examples"], 50);

    let mut args = vec!["answer".to_string()];
    args.extend(bench.clone());
    args.extend(["--se".into(), se.clone(), "--audit".into(), audit.clone()]);
    let ans = stub_run(&runs, &strs(&args)).unwrap();
    assert_eq!(ans.summary["upstream"], serde_json::json!([elab.run_id]));

    let score = stub_run(&runs, &["score", "--audit", &audit]).unwrap();
    assert_eq!(score.summary["upstream"], serde_json::json!([ans.run_id]));
    assert_eq!(score.summary["n"], 50);
    assert_eq!(score.summary["accuracy"], ans.summary["accuracy"]);

    let manifests: Vec<RunManifest> = Registry::new(&runs).load().unwrap();
    assert_eq!(manifests.len(), 3);
    assert_eq!(manifests[1].command, "answer");
    assert!(manifests[1].inputs.iter().any(|d| d.path == Path::new(&se)));
    assert!(manifests.iter().all(|m| m.finished.is_some()));
}

#[test]
fn identical_runs_have_identical_outputs_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let corpus = p(&dir.path().join("corpus.jsonl"));
    stub_run(&runs, &strs(&corpus_args(&corpus))).unwrap();
    let mut digests = Vec::new();
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = p(&dir.path().join(format!("{name}.jsonl")));
        stub_run(&runs, &["interleave", "--in", &corpus, "--out", &out, "--seed", seed]).unwrap();
        let m = Registry::new(&runs).load().unwrap().pop().unwrap();
        digests.push(m.outputs[0].sha256.clone());
    }
    assert_eq!(digests[0], digests[1]);
    assert_ne!(digests[0], digests[2]);
}

#[test]
fn corrupt_registry_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    std::fs::create_dir_all(&runs).unwrap();
    std::fs::write(runs.join("registry.jsonl"), "{not json\n").unwrap();
    let audit = fx("audit_baseline.jsonl");
    let err = stub_run(&runs, &["score", "--audit", &audit]).unwrap_err();
    assert_eq!(err.kind, "io");
    assert!(err.message.contains("registry.jsonl"), "{}", err.message);
    assert!(err.message.contains("line 1"), "{}", err.message);
}

#[test]
fn runs_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("from-env");
    let env = |k: &str| (k == "RUNS_DIR").then(|| p(&runs));
    let audit = fx("audit_baseline.jsonl");
    scene_elab_cli::run(&["scene-elab", "score", "--audit", &audit], &env).unwrap();
    assert!(runs.join("registry.jsonl").exists());
}

#[test]
fn knn_round_trip_on_ethics() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let index = p(&dir.path().join("index.jsonl"));
    let cache = p(&dir.path().join("emb.jsonl"));
    let train = fx("ethics_train.csv");
    let test = fx("ethics_test.csv");
    let built = stub_run(
        &runs,
        &[
            "knn",
            "build",
            "--dataset",
            "ethics_cs_test",
            "--input",
            &train,
            "--index",
            &index,
            "--emb-cache",
            &cache,
        ],
    )
    .unwrap();
    assert_eq!(built.summary["points"], 16);
    let dump = p(&dir.path().join("dump.jsonl"));
    let ev = stub_run(
        &runs,
        &[
            "knn",
            "evaluate",
            "--index",
            &index,
            "--dataset",
            "ethics_cs_test",
            "--input",
            &test,
            "--k",
            "3",
            "--dump",
            &dump,
        ],
    )
    .unwrap();
    assert_eq!(ev.summary["n"], 4);
    assert_eq!(ev.summary["upstream"], serde_json::json!([built.run_id]));
    let lines = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(lines.lines().count(), 4);

    let mismatch = stub_run(
        &runs,
        &[
            "knn",
            "evaluate",
            "--index",
            &index,
            "--with-se",
            "--dataset",
            "ethics_cs_test",
            "--input",
            &test,
        ],
    )
    .unwrap_err();
    assert_eq!(mismatch.kind, "usage");
}

#[test]
fn metrics_commands_report_fixture_values() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let agg = stub_run(&runs, &["metrics", "aggregate", "--in", &fx("annotations.jsonl")]).unwrap();
    assert_eq!(agg.summary["items"], 4);
    assert_eq!(agg.summary["systems"][0]["system"], "dream");
    let delta = stub_run(
        &runs,
        &[
            "metrics",
            "delta",
            "--baseline",
            &fx("audit_baseline.jsonl"),
            "--with-se",
            &fx("audit_with_se.jsonl"),
        ],
    )
    .unwrap();
    assert_eq!(delta.summary["wrong_to_correct"], 0.25);
}

fn export(dir: &Path) -> (String, String) {
    let runs = dir.join("runs");
    let se = p(&dir.join("se.jsonl"));
    let mut args = vec!["elaborate".to_string()];
    args.extend(siqa_args());
    args.extend(["--out".into(), se.clone()]);
    stub_run(&runs, &strs(&args)).unwrap();
    let tasks = p(&dir.join("tasks.jsonl"));
    let mut args = vec!["serve-annotation-export".to_string()];
    args.extend(siqa_args());
    args.extend(["--se".into(), format!("dream={se}"), "--out".into(), tasks.clone()]);
    let out = stub_run(&runs, &strs(&args)).unwrap();
    assert_eq!(out.summary["tasks"], 50);
    (tasks, se)
}

#[test]
fn task_export_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let (tasks, _) = export(dir.path());
    let text = std::fs::read_to_string(&tasks).unwrap();
    for line in text.lines() {
        let t: RatingTask = serde_json::from_str(line).unwrap();
        assert_eq!(t.options.len(), 3);
        assert!(t.gold_index < 3);
        assert!(!t.components.is_empty());
    }
}

const GOOD: &str = r#"{"item_id":"a","worker_id":"w1","system":"dream","accuracy":{"rot":1.0},"usefulness":{"rot":0.5},"consistency":0.75}"#;

#[test]
fn handler_routes_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    let ann = dir.path().join("ann.jsonl");
    std::fs::write(&tasks, "{\"item_id\":\"a\"}\n").unwrap();

    let (r, _) = handle("GET", "/tasks", "", &tasks, &ann);
    assert_eq!((r.status, r.content_type), (200, "application/x-ndjson"));
    let (r, _) = handle("GET", "/schema", "", &tasks, &ann);
    assert!(r.body.contains("consistency"));
    assert_eq!(handle("DELETE", "/tasks", "", &tasks, &ann).0.status, 405);
    assert_eq!(handle("GET", "/nope", "", &tasks, &ann).0.status, 404);
    assert_eq!(handle("OPTIONS", "/annotations", "", &tasks, &ann).0.status, 204);

    let bad = format!("{GOOD}\n{}", GOOD.replace("0.75", "0.6"));
    let (r, n) = handle("POST", "/annotations", &bad, &tasks, &ann);
    assert_eq!((r.status, n), (400, 0));
    assert!(r.body.contains("line 2"));
    assert!(!ann.exists() || std::fs::read_to_string(&ann).unwrap().is_empty());

    let (r, n) = handle("POST", "/annotations", &format!("{GOOD}\n{GOOD}\n"), &tasks, &ann);
    assert_eq!((r.status, n), (200, 2));
    assert_eq!(std::fs::read_to_string(&ann).unwrap().lines().count(), 2);

    assert!(parse_batch("").is_err());
    let mismatched = GOOD.replace(r#""usefulness":{"rot":0.5}"#, r#""usefulness":{"emotion":0.5}"#);
    assert!(parse_batch(&mismatched).is_err());
}

fn request(addr: &str, raw: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(raw.as_bytes()).unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn server_answers_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let (tasks, _) = export(dir.path());
    let ann = dir.path().join("ann.jsonl");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let tasks_path = std::path::PathBuf::from(&tasks);
    let ann_path = ann.clone();
    let server = std::thread::spawn(move || serve(listener, &tasks_path, &ann_path, Some(2)).unwrap());

    let got = request(&addr, "GET /tasks HTTP/1.1\r\nHost: x\r\n\r\n");
    assert!(got.starts_with("HTTP/1.1 200"), "{got}");
    assert!(got.contains("Access-Control-Allow-Origin"));
    assert_eq!(
        got.split("\r\n\r\n").nth(1).unwrap(),
        std::fs::read_to_string(&tasks).unwrap()
    );

    let body = format!("{GOOD}\n");
    let got = request(
        &addr,
        &format!(
            "POST /annotations HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        ),
    );
    assert!(got.starts_with("HTTP/1.1 200"), "{got}");
    let stats = server.join().unwrap();
    assert_eq!((stats.requests, stats.accepted), (2, 1));
    assert_eq!(std::fs::read_to_string(&ann).unwrap().trim(), GOOD);
}

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use censorlab::reward::{FeedbackDataset, Source};
use censorlab_run::config::RunConfig;
use censorlab_run::lab::Lab;
use censorlab_run::pipeline::{self, Mode};
use censorlab_run::record::{RunDir, BUFFER};
use censorlab_run::service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_preset("malign_dominant", seed).unwrap();
    cfg.feedback.rounds = 2;
    cfg.feedback.malign_quota = 3;
    cfg.feedback.benign_quota = 3;
    cfg.feedback.label_batch = 8;
    cfg.feedback.presented_cap = 400;
    cfg.feedback.base_iterations = 60;
    cfg.eval.n = 50;
    cfg
}

fn make_run(root: &Path, id: &str, cfg: RunConfig) {
    RunDir::create(&root.join(id), cfg).unwrap();
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn open(app: &Router, run: &str, round: usize, oracle_replay: bool) -> String {
    let (status, body) = call(
        app,
        "POST",
        "/api/sessions",
        Some(json!({ "run_id": run, "round": round, "oracle_replay": oracle_replay })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn unknown_run_and_session_are_not_found() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(AppState::new(tmp.path()));
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({"run_id": "nope", "round": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({"run_id": "../etc", "round": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for uri in ["/api/sessions/s9", "/api/sessions/s9/batch", "/api/runs/nope/metrics"] {
        assert_eq!(call(&app, "GET", uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, body) = call(&app, "GET", "/api/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "runs": [] }));
}

#[tokio::test]
async fn wrong_round_is_a_conflict() {
    let tmp = tempfile::tempdir().unwrap();
    make_run(tmp.path(), "run", small_config(3));
    let app = router(AppState::new(tmp.path()));
    let (status, body) = call(&app, "POST", "/api/sessions", Some(json!({"run_id": "run", "round": 2}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["open_round"], 1);
}

#[tokio::test]
async fn human_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(5);
    let world = cfg.world().unwrap();
    make_run(tmp.path(), "run", cfg);
    let app = router(AppState::new(tmp.path()));

    let sid = open(&app, "run", 1, false).await;
    let (status, body) = call(&app, "POST", "/api/sessions", Some(json!({"run_id": "run", "round": 1}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["session_id"], sid.as_str());

    let (status, body) = call(&app, "POST", &format!("/api/sessions/{sid}/complete"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "quota unmet");
    assert_eq!(body["remaining"], json!({"malign": 3, "benign": 3}));

    let labels_uri = format!("/api/sessions/{sid}/labels");
    let mut expected_seconds = 0.0;
    let mut first = true;
    loop {
        let (status, body) = call(&app, "GET", &format!("/api/sessions/{sid}/batch"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["world"]["components"].as_array().unwrap().len(), 7);
        let samples = body["samples"].as_array().unwrap().clone();
        if samples.is_empty() {
            assert!(body["progress"]["can_complete"].as_bool().unwrap());
            break;
        }
        // a second fetch serves the same open batch
        let (_, again) = call(&app, "GET", &format!("/api/sessions/{sid}/batch"), None).await;
        assert_eq!(again["samples"], body["samples"]);

        let decided: Vec<(String, u8, f64)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x: Vec<f64> = serde_json::from_value(s["x"].clone()).unwrap();
                (s["id"].as_str().unwrap().to_string(), world.oracle_label(&x).as_bit(), 250.0 + 10.0 * i as f64)
            })
            .collect();

        if first {
            first = false;
            let id = &decided[0].0;
            let bad = [
                (json!({"labels": {"r1b9i9": 1}}), StatusCode::UNPROCESSABLE_ENTITY),
                (json!({"labels": {id: 2}}), StatusCode::UNPROCESSABLE_ENTITY),
                (json!({"labels": {id: 1}, "elapsed_ms": {id: -1.0}}), StatusCode::UNPROCESSABLE_ENTITY),
                (json!({"labels": {}, "elapsed_ms": {id: 5.0}}), StatusCode::UNPROCESSABLE_ENTITY),
            ];
            for (post, code) in bad {
                assert_eq!(call(&app, "POST", &labels_uri, Some(post.clone())).await.0, code, "{post}");
            }
            // an uncommitted label may be revised
            let (status, body) = call(&app, "POST", &labels_uri, Some(json!({"labels": {id: 1 - decided[0].1}}))).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(body["committed"], false);
        }

        let half = decided.len() / 2;
        for part in [&decided[..half], &decided[..half], &decided[half..]] {
            let labels: serde_json::Map<String, Value> = part.iter().map(|(id, y, _)| (id.clone(), json!(y))).collect();
            let ms: serde_json::Map<String, Value> = part.iter().map(|(id, _, ms)| (id.clone(), json!(ms))).collect();
            let (status, body) = call(&app, "POST", &labels_uri, Some(json!({"labels": labels, "elapsed_ms": ms}))).await;
            assert_eq!(status, StatusCode::OK, "{body}");
        }
        expected_seconds += decided.iter().map(|d| d.2 / 1000.0).sum::<f64>();

        let (id, y, _) = &decided[0];
        let (status, _) = call(&app, "POST", &labels_uri, Some(json!({"labels": {id: y}}))).await;
        assert_eq!(status, StatusCode::OK, "resubmitting a committed label is idempotent");
        let (status, body) = call(&app, "POST", &labels_uri, Some(json!({"labels": {id: 1 - y}}))).await;
        assert_eq!(status, StatusCode::CONFLICT);
        assert_eq!(body["ids"], json!([id]));
    }

    let (status, body) = call(&app, "POST", &format!("/api/sessions/{sid}/complete"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "completed");
    assert_eq!(body["metrics"]["round"], 1);
    let (status, body) = call(&app, "POST", &format!("/api/sessions/{sid}/complete"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "round already completed");
    let (_, body) = call(&app, "GET", &format!("/api/sessions/{sid}"), None).await;
    assert_eq!(body["status"], "completed");

    let dir = RunDir::open(&tmp.path().join("run")).unwrap();
    let buffer = dir.read_feedback(BUFFER).unwrap().unwrap();
    assert!(buffer.records().iter().all(|r| r.source == Source::Human && r.round == 1));
    let t = dir.ledger.human_time;
    assert_eq!(t.human_labels, buffer.len());
    assert_eq!(t.oracle_labels, 0);
    assert!((t.human_seconds - expected_seconds).abs() < 1e-9, "{} vs {expected_seconds}", t.human_seconds);
    assert_eq!(dir.ledger.imitation_rounds, 1);

    // the run is free for the next round once the session completes
    let next = open(&app, "run", 2, false).await;
    assert_ne!(next, sid);

    let (_, body) = call(&app, "GET", "/api/runs", None).await;
    let run = &body["runs"][0];
    assert_eq!(run["run_id"], "run");
    assert_eq!(run["rounds_finished"], 1);
    assert_eq!(run["human_time"]["human_labels"], buffer.len());
    let (status, body) = call(&app, "GET", "/api/runs/run/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    let rows = body["metrics"]["imitation_rounds"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["round"], 1);
    assert!(rows[0]["malign_fraction"].is_number());
}

#[tokio::test]
async fn oracle_replay_session_matches_cli_imitation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(8);
    make_run(tmp.path(), "served", cfg.clone());
    let app = router(AppState::new(tmp.path()));
    for round in 1..=cfg.feedback.rounds {
        let sid = open(&app, "served", round, true).await;
        loop {
            let (status, body) = call(&app, "GET", &format!("/api/sessions/{sid}/batch"), None).await;
            assert_eq!(status, StatusCode::OK);
            let samples = body["samples"].as_array().unwrap();
            if samples.is_empty() {
                break;
            }
            assert_eq!(body["committed"], true);
            assert!(samples.iter().all(|s| s["label"].is_u64()));
        }
        let (status, body) = call(&app, "POST", &format!("/api/sessions/{sid}/complete"), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({"run_id": "served", "round": 3}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let cli_root = tmp.path().join("cli");
    let mut cli = RunDir::create(&cli_root, cfg.clone()).unwrap();
    let lab = Lab::new(cfg.clone()).unwrap();
    pipeline::imitate(&mut cli, &lab, Mode::Live, None).unwrap();

    let served = RunDir::open(&tmp.path().join("served")).unwrap();
    for rel in [
        BUFFER.to_string(),
        pipeline::imitation_ckpt(1),
        pipeline::imitation_ckpt(2),
        pipeline::ROUNDS_CSV.to_string(),
    ] {
        assert_eq!(served.read(&rel).unwrap(), cli.read(&rel).unwrap(), "{rel}");
    }
    let buffer = FeedbackDataset::read_jsonl(std::io::BufReader::new(served.read(BUFFER).unwrap().as_slice())).unwrap();
    assert_eq!(served.ledger.human_time.oracle_labels, buffer.len());
    assert_eq!(served.ledger.human_time.human_labels, 0);
}

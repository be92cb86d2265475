use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use sarcasm_annotate::http::{router, Assets, NextTask};
use sarcasm_annotate::*;
use sarcasm_core::corpus::{Corpus, Label, Sample, Split};
use serde_json::{json, Value};
use tower::ServiceExt;

fn corpus(neg: usize) -> Corpus {
    let mut v = vec![Sample::new(
        "p0",
        "yay",
        "img/p0.jpg",
        Some(Label::Sarcastic),
        Split::Train,
    )];
    for i in 0..neg {
        v.push(Sample::new(
            format!("n{i:03}"),
            format!("text {i}"),
            format!("img/n{i}.jpg"),
            Some(Label::NotSarcastic),
            Split::Train,
        ));
    }
    Corpus::new(v).unwrap()
}

fn gold() -> Vec<OnboardingItem> {
    (0..100)
        .map(|i| OnboardingItem {
            item_id: format!("g{i}"),
            text: format!("gold {i}"),
            image_ref: format!("gold/{i}.jpg"),
            label: if i % 3 == 0 {
                AnnLabel::Sarcasm
            } else {
                AnnLabel::NotSarcasm
            },
        })
        .collect()
}

fn app(svc: Arc<Service>, assets: &Assets) -> Router {
    router(svc, assets)
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
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

/// Registers a worker and answers `correct` onboarding items right.
async fn onboard(app: &Router, id: &str, correct: usize) -> Value {
    let (s, _) = call(
        app,
        "POST",
        "/api/annotators",
        Some(json!({"annotator_id": id, "role": "worker"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, batch) = call(app, "GET", "/api/onboarding", None).await;
    assert_eq!(s, StatusCode::OK);
    let items = batch["items"].as_array().unwrap();
    assert_eq!(items.len(), 100);
    assert!(items[0].get("label").is_none(), "gold labels must not leak");
    let answers: Vec<&str> = gold()
        .iter()
        .enumerate()
        .map(|(i, g)| match (i < correct, g.label) {
            (true, l) => l.as_str(),
            (false, AnnLabel::Sarcasm) => "NotSarcasm",
            (false, _) => "Sarcasm",
        })
        .collect();
    let (s, grade) = call(
        app,
        "POST",
        &format!("/api/annotators/{id}/onboarding"),
        Some(json!({"answers": answers})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    grade
}

#[tokio::test]
async fn onboarding_gate_over_http() {
    let svc = Arc::new(Service::open(corpus(3), gold(), ServiceConfig::default()).unwrap());
    let app = app(svc, &Assets::default());
    let pass = onboard(&app, "pass", 85).await;
    assert_eq!(pass["passed"], true);
    assert_eq!(pass["score"], 0.85);
    let fail = onboard(&app, "fail", 84).await;
    assert_eq!(fail["passed"], false);

    let (s, body) = call(&app, "GET", "/api/annotators/fail/next-task", None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(body["error"], "unauthorized");
    let (s, body) = call(&app, "GET", "/api/annotators/pass/next-task", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["task"]["kind"], "primary");
    let (s, profile) = call(&app, "GET", "/api/annotators/pass", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(profile["onboarding_passed"], true);
    assert_eq!(profile["pending_task"], body["task"]["task_id"]);
}

#[tokio::test]
async fn labeling_round_trip_and_errors() {
    let svc = Arc::new(Service::open(corpus(2), gold(), ServiceConfig::default()).unwrap());
    let app = app(svc.clone(), &Assets::default());
    onboard(&app, "w", 100).await;

    let (_, next) = call(&app, "GET", "/api/annotators/w/next-task", None).await;
    let task = &next["task"];
    assert_eq!(task["text"], "text 0");
    assert_eq!(task["image_url"], "/images/img/n0.jpg");
    assert_eq!(
        task["labels"],
        json!(["Sarcasm", "NotSarcasm", "Undecided"])
    );
    let id = task["task_id"].as_str().unwrap();

    let (s, r) = call(
        &app,
        "POST",
        "/api/annotators/w/labels",
        Some(json!({"task_id": id, "label": "Sarcasm"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["state"], "labeled");
    assert_eq!(r["event"]["label"], "Sarcasm");

    let (s, r) = call(
        &app,
        "POST",
        "/api/annotators/w/labels",
        Some(json!({"task_id": id, "label": "Sarcasm"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT, "{r}");
    let (s, _) = call(
        &app,
        "POST",
        "/api/annotators/w/labels",
        Some(json!({"task_id": id, "label": "Maybe"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(
        &app,
        "POST",
        "/api/annotators/w/labels",
        Some(json!({"task_id": "task-999999", "label": "Sarcasm"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/annotators/nobody/next-task", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, next) = call(&app, "GET", "/api/annotators/w/next-task", None).await;
    let id = next["task"]["task_id"].as_str().unwrap().to_owned();
    call(
        &app,
        "POST",
        "/api/annotators/w/labels",
        Some(json!({"task_id": id, "label": "NotSarcasm"})),
    )
    .await;
    let (_, next) = call(&app, "GET", "/api/annotators/w/next-task", None).await;
    assert_eq!(next["task"], Value::Null);

    let (s, p) = call(&app, "GET", "/api/progress", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["primary_total"], 2);
    assert_eq!(p["finalized"], 2);

    let (s, _) = call(&app, "GET", "/api/kappa", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    onboard(&app, "checker", 100).await;
    let (s, dc) = call(
        &app,
        "POST",
        "/api/double-check",
        Some(json!({"annotator_id": "checker", "n": 2, "seed": 5})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(dc["task_ids"].as_array().unwrap().len(), 2);
    for label in ["Sarcasm", "Sarcasm"] {
        let (_, next) = call(&app, "GET", "/api/annotators/checker/next-task", None).await;
        assert_eq!(next["task"]["kind"], "double_check");
        let id = next["task"]["task_id"].as_str().unwrap().to_owned();
        call(
            &app,
            "POST",
            "/api/annotators/checker/labels",
            Some(json!({"task_id": id, "label": label})),
        )
        .await;
    }
    let (s, k) = call(&app, "GET", "/api/kappa", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(k["n_items"], 2);
    assert_eq!(k["observed_agreement"], 0.5);

    let (s, e) = call(&app, "POST", "/api/export", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(e["flipped"], json!(["n000"]));
    assert_eq!(e["positives_after"]["train"], 2);
}

#[tokio::test]
async fn export_lists_unresolved_tasks() {
    let svc = Arc::new(Service::open(corpus(2), gold(), ServiceConfig::default()).unwrap());
    let app = app(svc, &Assets::default());
    let (s, body) = call(&app, "POST", "/api/export", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "unresolved");
    assert!(body["message"].as_str().unwrap().contains("task-000001"));
}

#[tokio::test]
async fn serves_images_and_ui() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images/img")).unwrap();
    std::fs::write(dir.path().join("images/img/n0.jpg"), b"JPEG").unwrap();
    std::fs::create_dir_all(dir.path().join("ui")).unwrap();
    std::fs::write(dir.path().join("ui/index.html"), "<html>ui</html>").unwrap();
    let svc = Arc::new(Service::open(corpus(1), gold(), ServiceConfig::default()).unwrap());
    let assets = Assets {
        images: Some(dir.path().join("images")),
        ui: Some(dir.path().join("ui")),
    };
    let app = app(svc, &assets);
    let (s, body) = call(&app, "GET", "/images/img/n0.jpg", None).await;
    assert_eq!((s, body), (StatusCode::OK, Value::String("JPEG".into())));
    let (s, body) = call(&app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(body.as_str().unwrap().contains("ui"));
    let (s, _) = call(&app, "GET", "/images/../ui/index.html", None).await;
    assert_ne!(s, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_polls_yield_distinct_tasks_and_replayable_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let config = ServiceConfig {
        log_path: Some(log.clone()),
        ..ServiceConfig::default()
    };
    let c = corpus(150);
    let svc = Arc::new(Service::open(c.clone(), gold(), config).unwrap());
    let app = app(svc.clone(), &Assets::default());
    onboard(&app, "a", 100).await;
    onboard(&app, "b", 100).await;

    let clients: Vec<_> = ["a", "b"]
        .into_iter()
        .map(|who| {
            let app = app.clone();
            tokio::spawn(async move {
                let mut got = Vec::new();
                for i in 0..100 {
                    let (s, body) = call(
                        &app,
                        "GET",
                        &format!("/api/annotators/{who}/next-task"),
                        None,
                    )
                    .await;
                    assert_eq!(s, StatusCode::OK);
                    let next: NextTask = serde_json::from_value(body).unwrap();
                    let Some(task) = next.task else { continue };
                    let label = if i % 7 == 0 {
                        "Undecided"
                    } else {
                        "NotSarcasm"
                    };
                    let (s, _) = call(
                        &app,
                        "POST",
                        &format!("/api/annotators/{who}/labels"),
                        Some(json!({"task_id": task.task_id, "label": label})),
                    )
                    .await;
                    assert_eq!(s, StatusCode::OK);
                    got.push(task.task_id);
                }
                got
            })
        })
        .collect();
    let mut all = Vec::new();
    for c in clients {
        all.extend(c.await.unwrap());
    }
    assert_eq!(all.len(), 150);
    let n = all.len();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), n, "a task was handed out twice");

    let live = svc.snapshot();
    let records: Vec<Record> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let replayed = State::replay(&select_candidates(&c), &records).unwrap();
    assert_eq!(replayed.snapshot(), live);
}

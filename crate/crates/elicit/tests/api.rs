use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

use metacausal::expert::{self, SessionExport};
use metacausal_elicit::{router, AppState};

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call_raw(app, method, uri, body).await;
    (s, if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() })
}

fn app() -> Router {
    router(Arc::new(AppState::new()))
}

async fn create(app: &Router, budget: usize) -> String {
    let (s, v) = call(app, "POST", "/api/v1/sessions", Some(json!({"world_ref": "synthetic:3", "budget": budget, "seed": 11}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_validates_its_body() {
    let app = app();
    let id = create(&app, 20).await;
    let (_, p) = call(&app, "GET", &format!("/api/v1/sessions/{id}/posterior"), None).await;
    assert_eq!(p["status"], "active");
    assert!(p["posterior_mean"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    assert!(p["posterior_std"].as_array().unwrap().iter().all(|v| (v.as_f64().unwrap() - 1.0).abs() < 1e-12));
    assert_eq!(p["projection"]["sources"].as_array().unwrap().len(), 20);

    for bad in [
        json!({"world_ref": "nowhere", "budget": 3}),
        json!({"budget": 3}),
        json!({"world_ref": "synthetic:1", "budget": "many"}),
        json!({"world_ref": "synthetic:1", "budget": 3, "extra": 1}),
    ] {
        let (s, v) = call(&app, "POST", "/api/v1/sessions", Some(bad)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(v["code"], "bad_request");
        assert!(v["message"].is_string());
    }
}

#[tokio::test]
async fn zero_budget_is_exhausted_at_once() {
    let app = app();
    let id = create(&app, 0).await;
    let (s, v) = call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "budget_exhausted");
}

#[tokio::test]
async fn unknown_sessions_are_404() {
    let app = app();
    for (m, path) in [("GET", "query"), ("GET", "posterior"), ("GET", "export"), ("POST", "abort")] {
        let (s, v) = call(&app, m, &format!("/api/v1/sessions/nope/{path}"), None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        assert_eq!(v["code"], "not_found");
    }
    let (s, _) = call(&app, "POST", "/api/v1/sessions/nope/answer", Some(json!({"query_index": 0, "choice": "i"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn query_is_pinned_until_answered() {
    let app = app();
    let id = create(&app, 5).await;
    let q = format!("/api/v1/sessions/{id}/query");
    let (_, a) = call(&app, "GET", &q, None).await;
    let (_, b) = call(&app, "GET", &q, None).await;
    assert_eq!(a, b);
    let eig = a["eig"].as_f64().unwrap();
    assert!((0.0..=std::f64::consts::LN_2).contains(&eig));
    assert_eq!(a["remaining"], 5);

    let ans = format!("/api/v1/sessions/{id}/answer");
    let (s, v) = call(&app, "POST", &ans, Some(json!({"query_index": 0, "choice": "k"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
    let (s, v) = call(&app, "POST", &ans, Some(json!({"query_index": 0, "choice": "i"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["remaining"], 4);
    let (s, v) = call(&app, "POST", &ans, Some(json!({"query_index": 0, "choice": "i"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("stale_query")));

    let (_, c) = call(&app, "GET", &q, None).await;
    assert_eq!(c["query_index"], 1);
}

#[tokio::test]
async fn finished_session_exports_a_replayable_history() {
    let app = app();
    let id = create(&app, 6).await;
    for k in 0..6 {
        let (_, q) = call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
        assert_eq!(q["query_index"], k);
        let choice = if k % 3 == 0 { "j" } else { "i" };
        let (s, _) = call(&app, "POST", &format!("/api/v1/sessions/{id}/answer"), Some(json!({"query_index": k, "choice": choice}))).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, p) = call(&app, "GET", &format!("/api/v1/sessions/{id}/posterior"), None).await;
    assert_eq!(p["status"], "exhausted");
    let (s, _) = call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (_, e1) = call_raw(&app, "GET", &format!("/api/v1/sessions/{id}/export"), None).await;
    let (_, e2) = call_raw(&app, "GET", &format!("/api/v1/sessions/{id}/export"), None).await;
    assert_eq!(e1, e2);
    let ex: SessionExport = serde_json::from_slice(&e1).unwrap();
    assert_eq!(ex.history.len(), 6);
    assert_eq!(ex.history[0].c, 0);
    assert_eq!(ex.history[1].c, 1);
    let replayed = expert::replay(&ex).unwrap();
    for (a, b) in replayed.posterior.mean.iter().zip(ex.posterior.mean.iter()) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[tokio::test]
async fn aborted_sessions_refuse_queries() {
    let app = app();
    let id = create(&app, 4).await;
    call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
    let (s, v) = call(&app, "POST", &format!("/api/v1/sessions/{id}/abort"), None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("aborted")));
    let (s, v) = call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("aborted")));
    let (s, _) = call(&app, "POST", &format!("/api/v1/sessions/{id}/answer"), Some(json!({"query_index": 0, "choice": "i"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn rmse_trace_follows_the_attached_truth() {
    let app = app();
    let body = json!({"world_ref": "synthetic:2", "target_shift": 4.0, "budget": 3, "seed": 1});
    let (_, v) = call(&app, "POST", "/api/v1/sessions", Some(body)).await;
    let id = v["session_id"].as_str().unwrap();
    for k in 0..3 {
        call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
        call(&app, "POST", &format!("/api/v1/sessions/{id}/answer"), Some(json!({"query_index": k, "choice": "i"}))).await;
    }
    let (_, e) = call(&app, "GET", &format!("/api/v1/sessions/{id}/export"), None).await;
    let trace = e["rmse_trace"].as_array().unwrap();
    assert_eq!(trace.len(), 4);
    // Prior mean is zero and the shift-4 target has norm 4 in four dimensions.
    assert!((trace[0].as_f64().unwrap() - 2.0).abs() < 1e-12);
}

#[tokio::test]
async fn event_log_records_each_change() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let app = router(Arc::new(AppState::new().with_event_log(&path).unwrap()));
    let id = create(&app, 2).await;
    call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
    call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
    call(&app, "POST", &format!("/api/v1/sessions/{id}/answer"), Some(json!({"query_index": 0, "choice": "j"}))).await;
    let lines: Vec<Value> = std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let events: Vec<&str> = lines.iter().map(|l| l["event"].as_str().unwrap()).collect();
    assert_eq!(events, ["create", "query", "answer"]);
    assert!(lines.iter().all(|l| l["session_id"] == id.as_str()));
}

#[tokio::test]
async fn cors_allows_browser_clients() {
    let app = app();
    let req = Request::builder().method("GET").uri("/api/v1/health").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

#[derive(Clone, Debug)]
enum Op {
    Query,
    Answer { offset: i64, choice: &'static str },
    Posterior,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Query),
        (-1i64..=1, prop_oneof![Just("i"), Just("j"), Just("x")]).prop_map(|(offset, choice)| Op::Answer { offset, choice }),
        Just(Op::Posterior),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any interleaving keeps one pinned query at most, advances the index by
    /// exactly one per accepted answer, and never exceeds the budget.
    #[test]
    fn interleavings_keep_session_invariants(ops in prop::collection::vec(op(), 1..16), budget in 0usize..5) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let app = app();
            let id = create(&app, budget).await;
            let mut answered = 0usize;
            let mut pinned: Option<Value> = None;
            for o in ops {
                match o {
                    Op::Query => {
                        let (s, v) = call(&app, "GET", &format!("/api/v1/sessions/{id}/query"), None).await;
                        if answered == budget {
                            prop_assert_eq!(s, StatusCode::CONFLICT);
                        } else {
                            prop_assert_eq!(s, StatusCode::OK);
                            prop_assert_eq!(v["query_index"].as_u64(), Some(answered as u64));
                            if let Some(p) = &pinned {
                                prop_assert_eq!(p, &v);
                            }
                            pinned = Some(v);
                        }
                    }
                    Op::Answer { offset, choice } => {
                        let idx = answered as i64 + offset;
                        if idx < 0 {
                            continue;
                        }
                        let body = json!({"query_index": idx, "choice": choice});
                        let (s, _) = call(&app, "POST", &format!("/api/v1/sessions/{id}/answer"), Some(body)).await;
                        let ok = choice != "x" && offset == 0 && pinned.is_some();
                        if choice == "x" {
                            prop_assert_eq!(s, StatusCode::BAD_REQUEST);
                        } else if ok {
                            prop_assert_eq!(s, StatusCode::OK);
                            answered += 1;
                            pinned = None;
                        } else {
                            prop_assert_eq!(s, StatusCode::CONFLICT);
                        }
                    }
                    Op::Posterior => {
                        let (s, v) = call(&app, "GET", &format!("/api/v1/sessions/{id}/posterior"), None).await;
                        prop_assert_eq!(s, StatusCode::OK);
                        prop_assert_eq!(v["history_len"].as_u64(), Some(answered as u64));
                        prop_assert_eq!(v["remaining"].as_u64(), Some((budget - answered) as u64));
                        prop_assert_eq!(v["pending"].is_null(), pinned.is_none());
                    }
                }
            }
            Ok(())
        })?;
    }
}

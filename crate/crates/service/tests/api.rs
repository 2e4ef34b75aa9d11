use std::sync::Arc;
use std::time::Duration;

use branchline::gateway::{CharEstimateCounter, Gateway, ScriptFault, ScriptStep, ScriptedBackend, StepTag, VirtualClock};
use branchline::orchestrator::{NewSession, Orchestrator, OrchestratorConfig};
use branchline::session::{Strategy, TurnResult};
use branchline::store::EdgeStore;
use branchline_service::{router, AppState};
use reqwest::StatusCode;
use serde_json::{json, Value};

const TREE: &str = r#"{
  "tree_id": "knee",
  "entry": "A",
  "edges": [
    {"transition_key": "t1", "node_from": "A", "node_to": "B", "answer": "pain"},
    {"transition_key": "t2", "node_from": "B", "node_to": "C", "answer": "severe"},
    {"transition_key": "t3", "node_from": "A", "node_to": "D", "answer": "no pain"}
  ]
}"#;

const LOOPED: &str = r#"{
  "tree_id": "loop",
  "entry": "A",
  "edges": [
    {"transition_key": "t1", "node_from": "A", "node_to": "B"},
    {"transition_key": "t2", "node_from": "B", "node_to": "C"},
    {"transition_key": "t3", "node_from": "C", "node_to": "B"}
  ]
}"#;

fn eval(next: &str) -> ScriptStep {
    ScriptStep::reply(StepTag::Evaluation, json!({"scratchpad": "s", "next_state": next}).to_string())
}

fn gen(text: &str) -> ScriptStep {
    ScriptStep::reply(StepTag::Generation, json!({"message": text, "reasoning": "r"}).to_string())
}

fn orchestrator(steps: Vec<ScriptStep>) -> Arc<Orchestrator> {
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(steps))).with_tokenizer(Arc::new(CharEstimateCounter));
    Arc::new(Orchestrator::new(
        Arc::new(EdgeStore::in_memory()),
        Arc::new(gateway),
        Default::default(),
        OrchestratorConfig::default(),
    ))
}

/// Latency accounted on a virtual clock, so results are byte-reproducible.
fn virtual_orchestrator(steps: Vec<ScriptStep>) -> Arc<Orchestrator> {
    let clock = Arc::new(VirtualClock::default());
    let backend = ScriptedBackend::new(steps).with_virtual_clock(clock.clone());
    let gateway = Gateway::new(Arc::new(backend))
        .with_clock(clock)
        .with_tokenizer(Arc::new(CharEstimateCounter));
    Arc::new(Orchestrator::new(
        Arc::new(EdgeStore::in_memory()),
        Arc::new(gateway),
        Default::default(),
        OrchestratorConfig::default(),
    ))
}

struct Server {
    base: String,
    http: reqwest::Client,
}

impl Server {
    async fn start(state: AppState) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
        Self {
            base,
            http: reqwest::Client::new(),
        }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn upload(&self, source: &str) -> (StatusCode, Value) {
        self.post("/trees", json!({"source": source, "format": "json"})).await
    }

    async fn session(&self, tree: &str) -> String {
        let (status, body) = self.post("/sessions", json!({"tree_id": tree, "external_context": {"age": 41}})).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }
}

#[tokio::test]
async fn tree_upload_and_report() {
    let s = Server::start(AppState::new(orchestrator(vec![]))).await;
    assert_eq!(s.get("/healthz").await.0, StatusCode::OK);
    let (status, report) = s.upload(TREE).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{report}");
    assert_eq!((report["version"].as_u64(), report["stored"].as_bool()), (Some(1), Some(true)));
    let (status, v) = s.get("/trees/knee/versions/1/report").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["is_valid"], true);
    let (status, err) = s.get("/trees/knee/versions/7/report").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "not_found");

    let (status, report) = s.upload(LOOPED).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(report["validation"]["unescapable_loops"], json!([["B", "C"]]));
    assert_eq!(report["stored"], false);
    assert_eq!(s.get("/trees/loop/versions/1/report").await.0, StatusCode::NOT_FOUND);

    let (status, err) = s.post("/trees", json!({"source": "{", "format": "json"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::BAD_REQUEST, Some("malformed_source")));
    let (status, err) = s.post("/trees", json!({"source": "x", "format": "yaml"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::BAD_REQUEST, Some("unsupported_format")));
}

#[tokio::test]
async fn inline_json_object_source() {
    let s = Server::start(AppState::new(orchestrator(vec![]))).await;
    let doc: Value = serde_json::from_str(TREE).unwrap();
    let (status, _) = s.post("/trees", json!({"source": doc, "format": "json", "tree_id": "other"})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(s.get("/trees/other/versions/1/report").await.0, StatusCode::OK);
}

#[tokio::test]
async fn session_lifecycle_and_trace() {
    let s = Server::start(AppState::new(orchestrator(vec![eval("t1"), eval("B"), gen("How bad is it?")]))).await;
    s.upload(TREE).await;
    let id = s.session("knee").await;
    let (_, trace) = s.get(&format!("/sessions/{id}/trace")).await;
    assert_eq!(trace["hops"], json!([]));
    let (status, turn) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "it hurts"})).await;
    assert_eq!(status, StatusCode::OK, "{turn}");
    assert_eq!(turn["final_node"], "B");
    assert_eq!(turn["message"], "How bad is it?");
    let (_, trace) = s.get(&format!("/sessions/{id}/trace")).await;
    let hops = trace["hops"].as_array().unwrap();
    assert_eq!(hops.len(), 2);
    assert_eq!(hops[0]["chosen"], json!({"kind": "transition", "transition_key": "t1"}));
    assert_eq!(hops[1]["chosen"], json!({"kind": "stay"}));
    assert_eq!(trace["current_node"], "B");
    let (_, session) = s.get(&format!("/sessions/{id}")).await;
    assert_eq!(session["history"].as_array().unwrap().len(), 2);

    assert_eq!(s.get("/sessions/nope/trace").await.0, StatusCode::NOT_FOUND);
    let (status, err) = s.post("/sessions/nope/messages", json!({"text": "hi"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (status, _) = s.post("/sessions", json!({"tree_id": "missing"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "  "})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::BAD_REQUEST, Some("empty_message")));
}

#[tokio::test]
async fn concurrent_turns_yield_exactly_one_conflict() {
    let slow = ScriptStep {
        latency_ms: Some(400),
        ..eval("A")
    };
    let s = Server::start(AppState::new(orchestrator(vec![slow, gen("ok"), eval("A"), gen("ok")]))).await;
    s.upload(TREE).await;
    let id = s.session("knee").await;
    let path = format!("/sessions/{id}/messages");
    let (a, b) = tokio::join!(s.post(&path, json!({"text": "one"})), s.post(&path, json!({"text": "two"})));
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let conflict = if a.0 == StatusCode::CONFLICT { a.1 } else { b.1 };
    assert_eq!(conflict["code"], "session_busy");
    let (_, session) = s.get(&format!("/sessions/{id}")).await;
    assert_eq!(session["turn_counter"], 1);
}

#[tokio::test]
async fn backend_failure_is_502_and_atomic() {
    let steps = vec![eval("t1"), ScriptStep::fault(StepTag::Evaluation, ScriptFault::Status(500))];
    let s = Server::start(AppState::new(orchestrator(steps))).await;
    s.upload(TREE).await;
    let id = s.session("knee").await;
    let (_, before) = s.get(&format!("/sessions/{id}")).await;
    let (status, err) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "hi"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::BAD_GATEWAY, Some("backend_error")));
    assert_eq!(s.get(&format!("/sessions/{id}")).await.1, before);
}

#[tokio::test]
async fn turn_ceiling_is_enforced() {
    let slow = ScriptStep {
        latency_ms: Some(2_000),
        ..eval("A")
    };
    let state = AppState::new(orchestrator(vec![slow])).with_turn_timeout(Duration::from_millis(150));
    let s = Server::start(state).await;
    s.upload(TREE).await;
    let id = s.session("knee").await;
    let (status, err) = s.post(&format!("/sessions/{id}/messages"), json!({"text": "hi"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::GATEWAY_TIMEOUT, Some("turn_timeout")));
    let (_, session) = s.get(&format!("/sessions/{id}")).await;
    assert_eq!(session["turn_counter"], 0);
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let s = Server::start(AppState::new(orchestrator(vec![])).with_token("t0k")).await;
    assert_eq!(s.get("/healthz").await.0, StatusCode::OK);
    let (status, err) = s.upload(TREE).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::UNAUTHORIZED, Some("unauthorized")));
    let r = s
        .http
        .post(format!("{}/trees", s.base))
        .bearer_auth("t0k")
        .json(&json!({"source": TREE, "format": "json"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
}

#[tokio::test]
async fn api_results_equal_direct_calls() {
    let script = || {
        vec![
            ScriptStep { latency_ms: Some(900), ..eval("t1") },
            ScriptStep { latency_ms: Some(700), ..eval("t2") },
            ScriptStep { latency_ms: Some(1500), ..gen("Go to urgent care.") },
        ]
    };

    let direct = virtual_orchestrator(script());
    direct
        .store()
        .put_tree(branchline::tree::DecisionTree::from_json(TREE).unwrap())
        .unwrap();
    let mut spec = NewSession::new("knee");
    spec.session_id = Some("fixed".into());
    let sid = direct.create_session(spec).unwrap().session_id;
    let want = direct.handle_turn(&sid, "yes, severe", Strategy::Arbor).await.unwrap();
    assert_eq!(want.total_latency_ms, 3100);

    let s = Server::start(AppState::new(virtual_orchestrator(script()))).await;
    s.upload(TREE).await;
    let (_, created) = s.post("/sessions", json!({"tree_id": "knee", "session_id": "fixed"})).await;
    let (_, got) = s
        .post("/sessions/fixed/messages", json!({"text": "yes, severe", "strategy": "arbor"}))
        .await;
    assert_eq!(created["current_node"], "A");
    let got: TurnResult = serde_json::from_value(got).unwrap();
    assert_eq!(got, want);
}

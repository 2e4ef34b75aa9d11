//! JSON-over-HTTP facade. Handlers only translate between wire bodies and
//! library calls; every decision is made beneath this layer.

mod config;
mod error;

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use branchline::ingest::{ingest, IngestReport, NormalizeOptions, NormalizerRegistry, SourceDocument, SourceFormat};
use branchline::orchestrator::{NewSession, Orchestrator};
use branchline::session::{SessionState, Strategy, TraceEntry, TurnResult};
use branchline::tree::NodeKey;
use branchline::validate::{validate, ValidationReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use config::{AppConfig, ConfigError};
pub use error::ApiError;

#[derive(Clone)]
pub struct AppState {
    orchestrator: Arc<Orchestrator>,
    registry: Arc<NormalizerRegistry>,
    token: Option<Arc<str>>,
    turn_timeout: Duration,
}

impl AppState {
    pub fn new(orchestrator: Arc<Orchestrator>) -> Self {
        Self {
            orchestrator,
            registry: Arc::new(NormalizerRegistry::default()),
            token: None,
            turn_timeout: Duration::from_secs(300),
        }
    }

    pub fn from_config(config: &AppConfig) -> Result<Self, ConfigError> {
        let store = Arc::new(config.open_store()?);
        let orchestrator = Arc::new(config.orchestrator(store)?);
        let mut state = Self::new(orchestrator).with_turn_timeout(Duration::from_millis(config.turn_timeout_ms));
        if let Some(token) = config.auth_token()? {
            state = state.with_token(token);
        }
        Ok(state)
    }

    /// Every route except `/healthz` then requires `Authorization: Bearer <token>`.
    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into().into());
        self
    }

    pub fn with_turn_timeout(mut self, timeout: Duration) -> Self {
        self.turn_timeout = timeout;
        self
    }

    pub fn with_registry(mut self, registry: NormalizerRegistry) -> Self {
        self.registry = Arc::new(registry);
        self
    }

    pub fn orchestrator(&self) -> &Arc<Orchestrator> {
        &self.orchestrator
    }
}

pub fn router(state: AppState) -> Router {
    let guarded = Router::new()
        .route("/trees", post(post_tree))
        .route("/trees/{id}/versions/{v}/report", get(get_report))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/trace", get(get_trace))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(guarded)
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let response = next.run(req).await;
    tracing::info!(
        %method,
        %path,
        status = response.status().as_u16(),
        elapsed_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    response
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_ref()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn healthz() -> Json<Value> {
    Json(serde_json::json!({"status": "ok"}))
}

/// Body of `POST /trees`. A JSON source may be inlined as an object.
#[derive(Debug, Deserialize)]
pub struct TreeUpload {
    pub source: Value,
    pub format: String,
    #[serde(default)]
    pub tree_id: Option<String>,
    #[serde(default)]
    pub entry: Option<String>,
    #[serde(default)]
    pub source_name: Option<String>,
}

async fn post_tree(State(state): State<AppState>, body: Json<TreeUpload>) -> Result<(StatusCode, Json<IngestReport>), ApiError> {
    let Json(up) = body;
    let payload = match up.source {
        Value::String(s) => s,
        other => other.to_string(),
    };
    let format: SourceFormat = up.format.parse().map_err(ApiError::bad_request)?;
    let source = SourceDocument::new(format, up.source_name.unwrap_or_else(|| "upload".into()), payload);
    let opts = NormalizeOptions {
        tree_id: up.tree_id,
        entry: up.entry,
    };
    let store = state.orchestrator.store().clone();
    let registry = state.registry.clone();
    let report = tokio::task::spawn_blocking(move || ingest(&source, &opts, &registry, &store))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let status = if report.stored {
        StatusCode::ACCEPTED
    } else {
        StatusCode::UNPROCESSABLE_ENTITY
    };
    Ok((status, Json(report)))
}

async fn get_report(State(state): State<AppState>, Path((id, v)): Path<(String, u64)>) -> Result<Json<ValidationReport>, ApiError> {
    let handle = state.orchestrator.store().load_version(&id, Some(v))?;
    Ok(Json(validate(handle.tree())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub tree_id: String,
    pub tree_version: u64,
    pub current_node: NodeKey,
}

async fn post_session(State(state): State<AppState>, Json(spec): Json<NewSession>) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let s = state.orchestrator.create_session(spec)?;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: s.session_id,
            tree_id: s.tree_id,
            tree_version: s.tree_version,
            current_node: s.current_node,
        }),
    ))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    Ok(Json(state.orchestrator.store().load_session(&id)?))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct UserMessage {
    pub text: String,
    #[serde(default)]
    pub strategy: Option<Strategy>,
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(msg): Json<UserMessage>,
) -> Result<Json<TurnResult>, ApiError> {
    let strategy = msg.strategy.unwrap_or(Strategy::Arbor);
    let turn = state.orchestrator.handle_turn(&id, &msg.text, strategy);
    match tokio::time::timeout(state.turn_timeout, turn).await {
        Ok(result) => Ok(Json(result?)),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "turn_timeout",
            format!("turn exceeded {} ms; session left unchanged", state.turn_timeout.as_millis()),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceView {
    pub session_id: String,
    pub current_node: NodeKey,
    pub turns: u64,
    pub hops: Vec<TraceEntry>,
}

async fn get_trace(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<TraceView>, ApiError> {
    let s = state.orchestrator.store().load_session(&id)?;
    Ok(Json(TraceView {
        session_id: s.session_id,
        current_node: s.current_node,
        turns: s.turn_counter,
        hops: s.trace,
    }))
}

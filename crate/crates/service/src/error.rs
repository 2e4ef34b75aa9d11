use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use branchline::gateway::GatewayError;
use branchline::ingest::IngestError;
use branchline::orchestrator::TurnError;
use branchline::store::StoreError;
use serde::Serialize;

/// Error body: `{"code", "message"}` plus the HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: &'static str,
    pub message: String,
    pub status: StatusCode,
}

#[derive(Serialize)]
struct Body<'a> {
    code: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            status,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            code: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match &e {
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            StoreError::SessionBusy(_) => (StatusCode::CONFLICT, "session_busy"),
            StoreError::UnknownNode(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_node"),
            StoreError::InvalidSession(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_session"),
            StoreError::Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "store_corrupt"),
            StoreError::StoreUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "store_unavailable"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let code = match &e {
            GatewayError::BackendTimeout => "backend_timeout",
            GatewayError::BackendError { .. } => "backend_error",
            GatewayError::MalformedResponse(_) => "backend_malformed_response",
            GatewayError::InvalidRequest(_) => "backend_invalid_request",
            GatewayError::Config(_) => "backend_config",
        };
        Self::new(StatusCode::BAD_GATEWAY, code, e.to_string())
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        let message = e.to_string();
        match e {
            TurnError::Store(s) => s.into(),
            TurnError::Gateway(g) => g.into(),
            TurnError::EmptyMessage => Self::new(StatusCode::BAD_REQUEST, "empty_message", message),
            TurnError::EvaluatorProtocol { .. } => Self::new(StatusCode::BAD_GATEWAY, "evaluator_protocol", message),
            TurnError::HopLimitExceeded { .. } => Self::new(StatusCode::BAD_GATEWAY, "hop_limit_exceeded", message),
            TurnError::EmptyGeneration => Self::new(StatusCode::BAD_GATEWAY, "empty_generation", message),
            TurnError::MalformedDecision(_) => Self::new(StatusCode::BAD_GATEWAY, "malformed_decision", message),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let message = e.to_string();
        match e {
            IngestError::Store(s) => s.into(),
            IngestError::MalformedSource { .. } => Self::new(StatusCode::BAD_REQUEST, "malformed_source", message),
            IngestError::DuplicateKey(_) => Self::new(StatusCode::BAD_REQUEST, "duplicate_key", message),
            IngestError::MissingField { .. } => Self::new(StatusCode::BAD_REQUEST, "missing_field", message),
            IngestError::UnsupportedFormat(_) => Self::new(StatusCode::BAD_REQUEST, "unsupported_format", message),
        }
    }
}

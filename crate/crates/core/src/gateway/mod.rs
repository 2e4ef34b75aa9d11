//! Provider-agnostic chat completion.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] with the timeout, retry policy,
//! clock and token counter used for every call. Backends only move text;
//! latency and usage accounting live here.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

mod clock;
mod http;
mod scripted;
mod tokenizer;

pub use clock::{Clock, VirtualClock, WallClock};
pub use http::HttpChatBackend;
pub use scripted::{ScriptFault, ScriptStep, ScriptedBackend};
pub use tokenizer::{CharEstimateCounter, O200kCounter, TokenCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepTag {
    Evaluation,
    Generation,
    Baseline,
}

impl StepTag {
    /// Deterministic evaluation, freer generation, baseline at zero.
    pub fn default_temperature(self) -> f64 {
        match self {
            StepTag::Evaluation => 0.0,
            StepTag::Generation => 0.7,
            StepTag::Baseline => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepTag::Evaluation => "evaluation",
            StepTag::Generation => "generation",
            StepTag::Baseline => "baseline",
        }
    }
}

impl fmt::Display for StepTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub step_tag: StepTag,
}

impl ChatRequest {
    pub fn new(step_tag: StepTag, model_id: impl Into<String>, system_prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            system_prompt: system_prompt.into(),
            messages: Vec::new(),
            temperature: step_tag.default_temperature(),
            max_output_tokens: 1024,
            step_tag,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output_tokens(mut self, max: u32) -> Self {
        self.max_output_tokens = max;
        self
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>) {
        self.messages.push(ChatMessage {
            role,
            text: text.into(),
        });
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.system_prompt.trim().is_empty() && self.messages.iter().all(|m| m.text.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be a non-negative number",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Token counters for one or more calls. Addition sums counts and keeps the
/// estimated flag if any part was estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
}

impl Usage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
            estimated: false,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl std::ops::Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
            estimated: self.estimated || rhs.estimated,
        }
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    /// Counter that produced the usage when the backend reported none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
}

/// What a backend hands back before accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend timed out")]
    BackendTimeout,
    #[error("backend error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    BackendError { status: Option<u16>, message: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    async fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError>;
}

/// Extra attempts after a timeout, per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub evaluation: u32,
    pub generation: u32,
    pub baseline: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            evaluation: 1,
            generation: 0,
            baseline: 0,
        }
    }
}

impl RetryPolicy {
    pub fn retries_for(&self, tag: StepTag) -> u32 {
        match tag {
            StepTag::Evaluation => self.evaluation,
            StepTag::Generation => self.generation,
            StepTag::Baseline => self.baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    /// OpenAI-style chat-completions endpoint.
    HttpChat {
        /// Full URL; falls back to `BRANCHLINE_ENDPOINT`.
        #[serde(default)]
        endpoint: Option<String>,
        /// Name of the environment variable holding the bearer token.
        #[serde(default = "default_auth_env")]
        auth_env: String,
    },
    /// Canned replies from a JSON-lines file or inline steps.
    Scripted {
        #[serde(default)]
        script: Option<PathBuf>,
        #[serde(default)]
        steps: Vec<ScriptStep>,
        /// Account scripted latencies on a virtual clock instead of sleeping.
        #[serde(default)]
        virtual_clock: bool,
    },
}

fn default_auth_env() -> String {
    "BRANCHLINE_API_KEY".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_ms() -> u64 {
    120_000
}

impl BackendConfig {
    pub fn http(endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpChat {
                endpoint: Some(endpoint.into()),
                auth_env: default_auth_env(),
            },
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn scripted_file(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted {
                script: Some(path.into()),
                steps: Vec::new(),
                virtual_clock: false,
            },
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Inline scripted backend configuration from an ordered list of replies.
pub fn script_backend(steps: Vec<ScriptStep>) -> Result<BackendConfig, GatewayError> {
    if steps.is_empty() {
        return Err(GatewayError::Config("script must contain at least one reply".into()));
    }
    Ok(BackendConfig {
        kind: BackendKind::Scripted {
            script: None,
            steps,
            virtual_clock: false,
        },
        timeout_ms: default_timeout_ms(),
        retry: RetryPolicy::default(),
    })
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    tokenizer: Arc<dyn TokenCounter>,
    clock: Arc<dyn Clock>,
    timeout: Duration,
    retry: RetryPolicy,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("tokenizer", &self.tokenizer.name())
            .field("timeout", &self.timeout)
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            tokenizer: Arc::new(O200kCounter),
            clock: Arc::new(WallClock::new()),
            timeout: Duration::from_millis(default_timeout_ms()),
            retry: RetryPolicy::default(),
        }
    }

    /// Builds the backend described by `config`.
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        let gateway = match &config.kind {
            BackendKind::HttpChat { endpoint, auth_env } => {
                let endpoint = endpoint
                    .clone()
                    .or_else(|| std::env::var("BRANCHLINE_ENDPOINT").ok())
                    .ok_or_else(|| GatewayError::Config("no endpoint configured".into()))?;
                let token = std::env::var(auth_env).ok();
                Gateway::new(Arc::new(HttpChatBackend::new(endpoint, token)?))
            }
            BackendKind::Scripted {
                script,
                steps,
                virtual_clock,
            } => {
                let mut all = match script {
                    Some(path) => ScriptedBackend::read_script(path)?,
                    None => Vec::new(),
                };
                all.extend(steps.iter().cloned());
                if *virtual_clock {
                    let clock = Arc::new(VirtualClock::default());
                    let backend = ScriptedBackend::new(all).with_virtual_clock(clock.clone());
                    Gateway::new(Arc::new(backend)).with_clock(clock)
                } else {
                    Gateway::new(Arc::new(ScriptedBackend::new(all)))
                }
            }
        };
        Ok(gateway
            .with_timeout(Duration::from_millis(config.timeout_ms))
            .with_retry(config.retry))
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn TokenCounter>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn tokenizer(&self) -> &Arc<dyn TokenCounter> {
        &self.tokenizer
    }

    /// Input tokens of a request as counted by this gateway's tokenizer.
    pub fn count_prompt_tokens(&self, request: &ChatRequest) -> u64 {
        let mut n = self.tokenizer.count(&request.system_prompt);
        for m in &request.messages {
            n += self.tokenizer.count(&m.text);
        }
        n as u64
    }

    pub async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.check()?;
        let attempts = 1 + self.retry.retries_for(request.step_tag);
        let started = self.clock.now_ms();
        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            let outcome = tokio::time::timeout(self.timeout, self.backend.send(request)).await;
            match outcome {
                Ok(Ok(reply)) => break reply,
                Ok(Err(GatewayError::BackendTimeout)) | Err(_) if attempt < attempts => {
                    tracing::warn!(step = %request.step_tag, attempt, "backend timed out, retrying");
                }
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(GatewayError::BackendTimeout),
            }
        };
        let latency_ms = self.clock.now_ms().saturating_sub(started);
        tracing::debug!(
            backend = self.backend.name(),
            step = %request.step_tag,
            model = %request.model_id,
            latency_ms,
            "completion"
        );
        let (usage, tokenizer) = match reply.usage {
            Some(u) => (u, None),
            None => (
                Usage {
                    input_tokens: self.count_prompt_tokens(request),
                    output_tokens: self.tokenizer.count(&reply.text) as u64,
                    estimated: true,
                },
                Some(self.tokenizer.name().to_string()),
            ),
        };
        Ok(ChatResponse {
            text: reply.text,
            usage,
            latency_ms,
            tokenizer,
        })
    }
}

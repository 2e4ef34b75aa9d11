use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError, Role, Usage};

/// Chat-completions client for any OpenAI-compatible endpoint.
pub struct HttpChatBackend {
    endpoint: String,
    token: Option<String>,
    client: reqwest::Client,
}

impl std::fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatBackend")
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl HttpChatBackend {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            token,
            client,
        })
    }

    fn wire_body<'a>(request: &'a ChatRequest) -> WireRequest<'a> {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        if !request.system_prompt.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &request.system_prompt,
            });
        }
        for m in &request.messages {
            messages.push(WireMessage {
                role: match m.role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                },
                content: &m.text,
            });
        }
        WireRequest {
            model: &request.model_id,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        }
    }
}

#[async_trait]
impl ChatBackend for HttpChatBackend {
    fn name(&self) -> &str {
        "http-chat"
    }

    async fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let body = Self::wire_body(request);
        tracing::trace!(
            endpoint = %self.endpoint,
            body = %serde_json::to_string(&body).unwrap_or_default(),
            "chat request"
        );
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let response = req.send().await.map_err(|e| {
            if e.is_timeout() {
                GatewayError::BackendTimeout
            } else {
                GatewayError::BackendError {
                    status: None,
                    message: e.to_string(),
                }
            }
        })?;
        let status = response.status();
        let text = response.text().await.map_err(|e| GatewayError::BackendError {
            status: Some(status.as_u16()),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::BackendError {
                status: Some(status.as_u16()),
                message: text.chars().take(500).collect(),
            });
        }
        tracing::trace!(body = %text, "chat response");
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("no message content in choices".into()))?;
        Ok(BackendReply {
            text: content,
            usage: parsed
                .usage
                .map(|u| Usage::new(u.prompt_tokens, u.completion_tokens)),
        })
    }
}

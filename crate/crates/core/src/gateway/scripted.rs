use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError, StepTag, Usage, VirtualClock};

/// Injected failure for a scripted reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptFault {
    Timeout,
    Status(u16),
    Malformed,
}

/// One canned reply, consumed by the next request with the same step tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub step_tag: StepTag,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// Simulated latency: slept on the wall clock, or added to a virtual one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<ScriptFault>,
}

impl ScriptStep {
    pub fn reply(step_tag: StepTag, text: impl Into<String>) -> Self {
        Self {
            step_tag,
            text: text.into(),
            usage: None,
            latency_ms: None,
            fault: None,
        }
    }

    pub fn fault(step_tag: StepTag, fault: ScriptFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::reply(step_tag, "")
        }
    }
}

/// Deterministic backend replaying per-step queues. Never touches the network.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queues: Mutex<HashMap<StepTag, VecDeque<ScriptStep>>>,
    captured: Mutex<Vec<ChatRequest>>,
    clock: Option<Arc<VirtualClock>>,
}

impl ScriptedBackend {
    pub fn new(steps: impl IntoIterator<Item = ScriptStep>) -> Self {
        let backend = Self::default();
        backend.enqueue(steps);
        backend
    }

    pub fn with_virtual_clock(mut self, clock: Arc<VirtualClock>) -> Self {
        self.clock = Some(clock);
        self
    }

    /// Parses a JSON-lines script; blank lines are skipped.
    pub fn parse_script(text: &str) -> Result<Vec<ScriptStep>, GatewayError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| GatewayError::Config(format!("script line {}: {e}", i + 1)))
            })
            .collect()
    }

    pub fn read_script(path: &Path) -> Result<Vec<ScriptStep>, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_script(&text)
    }

    pub fn enqueue(&self, steps: impl IntoIterator<Item = ScriptStep>) {
        let mut queues = self.queues.lock().expect("script queues");
        for step in steps {
            queues.entry(step.step_tag).or_default().push_back(step);
        }
    }

    pub fn remaining(&self, tag: StepTag) -> usize {
        self.queues
            .lock()
            .expect("script queues")
            .get(&tag)
            .map_or(0, VecDeque::len)
    }

    /// Every request received so far, in arrival order.
    pub fn captured(&self) -> Vec<ChatRequest> {
        self.captured.lock().expect("captured requests").clone()
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    async fn send(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        self.captured.lock().expect("captured requests").push(request.clone());
        let step = self
            .queues
            .lock()
            .expect("script queues")
            .get_mut(&request.step_tag)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| GatewayError::BackendError {
                status: None,
                message: format!("script exhausted for {} replies", request.step_tag),
            })?;
        if let Some(ms) = step.latency_ms {
            match &self.clock {
                Some(clock) => clock.advance(ms),
                None => tokio::time::sleep(Duration::from_millis(ms)).await,
            }
        }
        match step.fault {
            Some(ScriptFault::Timeout) => Err(GatewayError::BackendTimeout),
            Some(ScriptFault::Status(status)) => Err(GatewayError::BackendError {
                status: Some(status),
                message: "scripted failure".into(),
            }),
            Some(ScriptFault::Malformed) => {
                Err(GatewayError::MalformedResponse("scripted malformed body".into()))
            }
            None => Ok(BackendReply {
                text: step.text,
                usage: step.usage,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_json_lines() {
        let script = r#"
{"step_tag": "evaluation", "text": "{\"scratchpad\":\"s\",\"next_state\":\"A\"}"}

{"step_tag": "generation", "text": "hello", "latency_ms": 5, "usage": {"input_tokens": 3, "output_tokens": 1}}
{"step_tag": "generation", "fault": {"status": 503}}
"#;
        let steps = ScriptedBackend::parse_script(script).unwrap();
        assert_eq!(steps.len(), 3);
        assert_eq!(steps[1].usage, Some(Usage::new(3, 1)));
        assert_eq!(steps[2].fault, Some(ScriptFault::Status(503)));
        assert!(ScriptedBackend::parse_script("{oops").is_err());
    }
}

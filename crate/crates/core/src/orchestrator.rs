//! The two-step turn loop.
//!
//! Step one walks the tree: retrieve the current node's outgoing edges, ask
//! the evaluator to pick one or stay, and repeat from the new node until it
//! stays or reaches a terminal. Step two makes one independent generation
//! call whose prompt is chosen by the final node's role and carries the last
//! evaluator scratchpad.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role, StepTag, Usage};
use crate::session::{
    HistoryEntry, HopChoice, HopRecord, SessionState, Speaker, Strategy, TraceEntry, TurnResult, Utterance,
};
use crate::store::{EdgeStore, StoreError, StoredTreeHandle};
use crate::template::{extract_json_object, PromptSet, PromptTemplate, TemplateContext};
use crate::tree::{NodeKey, NodeRole, TransitionEdge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub evaluation_model: String,
    pub generation_model: String,
    pub baseline_model: String,
    /// Evaluation calls allowed per turn.
    pub hop_limit: usize,
    /// Most recent user/agent exchanges shown to the model; all when unset.
    pub history_window: Option<usize>,
    pub evaluation_temperature: Option<f64>,
    pub generation_temperature: Option<f64>,
    pub baseline_temperature: Option<f64>,
    pub max_output_tokens: u32,
    /// JSON-lines file receiving one line per hop.
    pub trace_path: Option<PathBuf>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            evaluation_model: "default".into(),
            generation_model: "default".into(),
            baseline_model: "default".into(),
            hop_limit: 25,
            history_window: None,
            evaluation_temperature: None,
            generation_temperature: None,
            baseline_temperature: None,
            max_output_tokens: 1024,
            trace_path: None,
        }
    }
}

impl OrchestratorConfig {
    /// The same model for every step.
    pub fn single_model(model: impl Into<String>) -> Self {
        let model = model.into();
        Self {
            evaluation_model: model.clone(),
            generation_model: model.clone(),
            baseline_model: model,
            ..Self::default()
        }
    }

    pub(crate) fn request(&self, tag: StepTag, system_prompt: String) -> ChatRequest {
        let (model, temperature) = match tag {
            StepTag::Evaluation => (&self.evaluation_model, self.evaluation_temperature),
            StepTag::Generation => (&self.generation_model, self.generation_temperature),
            StepTag::Baseline => (&self.baseline_model, self.baseline_temperature),
        };
        let req = ChatRequest::new(tag, model.clone(), system_prompt).with_max_output_tokens(self.max_output_tokens);
        match temperature {
            Some(t) => req.with_temperature(t),
            None => req,
        }
    }
}

/// Why an evaluator reply could not be used.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecisionError {
    #[error("unparseable decision: {0}")]
    MalformedDecision(String),
    #[error("next_state '{next_state}' is not one of {allowed:?}")]
    InvalidTransition { next_state: String, allowed: Vec<String> },
}

#[derive(Debug, thiserror::Error)]
pub enum TurnError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("user message is empty")]
    EmptyMessage,
    #[error("evaluator protocol violation at '{node}' after a corrective re-prompt: {reason}")]
    EvaluatorProtocol { node: NodeKey, reason: DecisionError },
    #[error("hop limit {limit} reached; last confirmed node '{last_node}'")]
    HopLimitExceeded { limit: usize, last_node: NodeKey },
    #[error("generation returned an empty message")]
    EmptyGeneration,
    #[error("unparseable baseline reply: {0}")]
    MalformedDecision(String),
}

/// Parsed evaluator reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorDecision {
    pub scratchpad: String,
    pub next_state: HopChoice,
}

fn clean_state(raw: &str) -> &str {
    raw.trim().trim_matches(|c| c == '\'' || c == '"' || c == '`').trim()
}

/// Reads `{"scratchpad", "next_state"}` from a reply. The stay key takes
/// precedence when it collides with a candidate transition key.
pub fn parse_evaluator_output(
    raw: &str,
    candidates: &[&str],
    stay_key: &str,
) -> Result<EvaluatorDecision, DecisionError> {
    let obj = extract_json_object(raw)
        .ok_or_else(|| DecisionError::MalformedDecision("no JSON object in reply".into()))?;
    let next = obj
        .get("next_state")
        .and_then(|v| v.as_str())
        .ok_or_else(|| DecisionError::MalformedDecision("missing string field next_state".into()))?;
    let scratchpad = match obj.get("scratchpad") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    };
    let next = clean_state(next);
    let next_state = if next == stay_key {
        HopChoice::Stay
    } else if candidates.contains(&next) {
        HopChoice::Transition(next.to_string())
    } else {
        let mut allowed: Vec<String> = candidates.iter().map(|s| s.to_string()).collect();
        allowed.push(stay_key.to_string());
        return Err(DecisionError::InvalidTransition {
            next_state: next.to_string(),
            allowed,
        });
    };
    Ok(EvaluatorDecision { scratchpad, next_state })
}

/// Conversation lines as shown in every prompt.
pub fn render_conversation(history: &[HistoryEntry]) -> String {
    history
        .iter()
        .map(|h| {
            let who = match h.speaker {
                Speaker::Agent => "Agent",
                Speaker::User => "User",
            };
            format!("  {who}: {}", h.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Candidate edges as listed to the evaluator, in stored order.
pub fn render_candidates(edges: &[&TransitionEdge]) -> String {
    let list: Vec<serde_json::Value> = edges
        .iter()
        .map(|e| {
            serde_json::json!({
                "key": e.transition_key,
                "condition": e.answer,
                "question": e.question,
                "extra_context": e.extra_context,
            })
        })
        .collect();
    serde_json::to_string_pretty(&list).expect("candidate list serializes")
}

pub(crate) fn base_context(session: &SessionState, window: Option<usize>) -> TemplateContext {
    let mut ctx = TemplateContext::new().with_member_context(&session.external_context);
    let local_time = session
        .external_context
        .get("local_time")
        .and_then(|v| v.as_str())
        .unwrap_or("not provided");
    ctx.set("member_local_time", local_time)
        .set("conversation", render_conversation(session.recent_history(window)));
    ctx
}

/// Parameters for a new session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NewSession {
    pub tree_id: String,
    #[serde(default)]
    pub version: Option<u64>,
    #[serde(default)]
    pub external_context: BTreeMap<String, serde_json::Value>,
    /// Starting node; the entry when unset.
    #[serde(default)]
    pub start_node: Option<String>,
    /// Prior messages to seed the history with.
    #[serde(default)]
    pub history: Vec<Utterance>,
    #[serde(default)]
    pub session_id: Option<String>,
}

impl NewSession {
    pub fn new(tree_id: impl Into<String>) -> Self {
        Self {
            tree_id: tree_id.into(),
            ..Self::default()
        }
    }
}

/// Outcome of step one.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub final_node: NodeKey,
    pub hops: Vec<HopRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub message: String,
    pub reasoning: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
struct TraceLine<'a> {
    session_id: &'a str,
    tree_id: &'a str,
    tree_version: u64,
    #[serde(flatten)]
    entry: &'a TraceEntry,
}

pub struct Orchestrator {
    store: Arc<EdgeStore>,
    gateway: Arc<Gateway>,
    prompts: Arc<PromptSet>,
    config: OrchestratorConfig,
    trace_sink: Mutex<()>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("gateway", &self.gateway)
            .field("config", &self.config)
            .finish()
    }
}

impl Orchestrator {
    pub fn new(store: Arc<EdgeStore>, gateway: Arc<Gateway>, prompts: PromptSet, config: OrchestratorConfig) -> Self {
        Self {
            store,
            gateway,
            prompts: Arc::new(prompts),
            config,
            trace_sink: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &Arc<EdgeStore> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    /// Creates and persists a session pinned to a stored tree version.
    pub fn create_session(&self, spec: NewSession) -> Result<SessionState, TurnError> {
        let handle = self.store.load_version(&spec.tree_id, spec.version)?;
        let start = match &spec.start_node {
            Some(k) => handle
                .node(k)
                .map_err(|_| StoreError::InvalidSession(format!("start node '{k}' is not in the tree")))?
                .clone(),
            None => handle.entry().clone(),
        };
        let id = spec
            .session_id
            .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let mut session = SessionState::new(id, handle.tree_id(), handle.version(), start);
        session.external_context = spec.external_context;
        for u in spec.history {
            session.push_history(u.speaker, u.text);
        }
        self.store.persist_session(&session)?;
        Ok(session)
    }

    /// Step one. `session` already holds the user message.
    pub async fn evaluate_transitions(
        &self,
        session: &SessionState,
        handle: &StoredTreeHandle,
    ) -> Result<Evaluation, TurnError> {
        let mut current = session.current_node.clone();
        let mut hops: Vec<HopRecord> = Vec::new();
        let base = base_context(session, self.config.history_window);
        loop {
            let edges = handle.outgoing_edges(&current)?;
            if edges.is_empty() {
                break;
            }
            if hops.len() >= self.config.hop_limit {
                return Err(TurnError::HopLimitExceeded {
                    limit: self.config.hop_limit,
                    last_node: current,
                });
            }
            let meta = handle.meta(&current);
            let mut ctx = base.clone();
            ctx.set("stay_key", current.as_str())
                .set("question", handle.node_question(&current).unwrap_or_default())
                .set("question_explanation", meta.question_explanation)
                .set("tree_context", meta.tree_context)
                .set("nodes", render_candidates(&edges));
            let keys: Vec<&str> = edges.iter().map(|e| e.transition_key.as_str()).collect();
            let (decision, usage, latency_ms) = self.evaluate_once(&ctx, &keys, current.as_str()).await?;
            let to_node = match &decision.next_state {
                HopChoice::Stay => current.clone(),
                HopChoice::Transition(k) => edges
                    .iter()
                    .find(|e| &e.transition_key == k)
                    .map(|e| e.node_to.clone())
                    .expect("parsed keys are candidates"),
            };
            let stay = decision.next_state == HopChoice::Stay;
            tracing::debug!(from = %current, to = %to_node, stay, "hop");
            hops.push(HopRecord {
                from_node: current.clone(),
                chosen: decision.next_state,
                to_node: to_node.clone(),
                scratchpad: decision.scratchpad,
                usage,
                latency_ms,
            });
            if stay {
                break;
            }
            current = to_node;
        }
        Ok(Evaluation {
            final_node: current,
            hops,
        })
    }

    /// One evaluation call plus at most one corrective re-prompt.
    async fn evaluate_once(
        &self,
        ctx: &TemplateContext,
        keys: &[&str],
        stay_key: &str,
    ) -> Result<(EvaluatorDecision, Usage, u64), TurnError> {
        let mut request = self
            .config
            .request(StepTag::Evaluation, self.prompts.evaluator.render(ctx));
        let first = self.gateway.complete(&request).await?;
        let mut usage = first.usage;
        let mut latency = first.latency_ms;
        let problem = match parse_evaluator_output(&first.text, keys, stay_key) {
            Ok(d) => return Ok((d, usage, latency)),
            Err(e) => e,
        };
        tracing::warn!(node = stay_key, %problem, "evaluator reply rejected, re-prompting");
        let mut allowed: Vec<&str> = keys.to_vec();
        allowed.push(stay_key);
        let mut correction = TemplateContext::new();
        correction
            .set("problem", problem.to_string())
            .set("allowed", allowed.iter().map(|k| format!("'{k}'")).collect::<Vec<_>>().join(", "));
        request.push(Role::Assistant, first.text);
        request.push(Role::User, self.prompts.corrective.render(&correction));
        let second = self.gateway.complete(&request).await?;
        usage += second.usage;
        latency += second.latency_ms;
        parse_evaluator_output(&second.text, keys, stay_key)
            .map(|d| (d, usage, latency))
            .map_err(|reason| TurnError::EvaluatorProtocol {
                node: NodeKey::new(stay_key).expect("stay key is a node key"),
                reason,
            })
    }

    /// Step two, for the node the evaluation settled on.
    pub async fn generate_message(
        &self,
        session: &SessionState,
        handle: &StoredTreeHandle,
        final_node: &NodeKey,
        evaluator_scratchpad: &str,
    ) -> Result<Generation, TurnError> {
        let template: &PromptTemplate = match handle.role(final_node).map_err(|_| StoreError::UnknownNode(final_node.clone()))? {
            NodeRole::Question => &self.prompts.generation_question,
            NodeRole::Guidance => &self.prompts.generation_guidance,
            NodeRole::Terminal => &self.prompts.generation_terminal,
        };
        let meta = handle.meta(final_node);
        let mut ctx = base_context(session, self.config.history_window);
        ctx.set("stay_key", final_node.as_str())
            .set("question", handle.node_question(final_node).unwrap_or_default())
            .set("question_explanation", meta.question_explanation)
            .set("tree_context", meta.tree_context)
            .set("evaluator_scratchpad", evaluator_scratchpad);
        let request = self.config.request(StepTag::Generation, template.render(&ctx));
        let response = self.gateway.complete(&request).await?;
        let (message, reasoning) = parse_generation(&response.text);
        if message.trim().is_empty() {
            return Err(TurnError::EmptyGeneration);
        }
        Ok(Generation {
            message,
            reasoning,
            usage: response.usage,
            latency_ms: response.latency_ms,
        })
    }

    /// Runs one turn. The session is claimed for the duration of the turn
    /// and only persisted when every step succeeded.
    pub async fn handle_turn(
        &self,
        session_id: &str,
        user_message: &str,
        strategy: Strategy,
    ) -> Result<TurnResult, TurnError> {
        if user_message.trim().is_empty() {
            return Err(TurnError::EmptyMessage);
        }
        let _claim = self.store.try_lock_session(session_id)?;
        let before = self.store.load_session(session_id)?;
        let handle = self.store.load_version(&before.tree_id, Some(before.tree_version))?;
        let mut working = before.clone();
        working.turn_counter += 1;
        working.push_history(Speaker::User, user_message);
        let started = self.gateway.clock().now_ms();

        let result = match strategy {
            Strategy::Arbor => self.arbor_turn(&working, &handle).await?,
            Strategy::Baseline => {
                baseline::baseline_turn(&self.gateway, &self.prompts, &self.config, &working, &handle).await?
            }
        };
        let result = TurnResult {
            total_latency_ms: self.gateway.clock().now_ms().saturating_sub(started),
            ..result
        };

        working.current_node = result.final_node.clone();
        working.push_history(Speaker::Agent, result.message.clone());
        let first_new = working.trace.len();
        working.trace.extend(result.hops.iter().enumerate().map(|(i, hop)| TraceEntry {
            turn: working.turn_counter,
            hop_index: i,
            hop: hop.clone(),
        }));
        self.store.persist_session(&working)?;
        self.append_trace(&working, &working.trace[first_new..]);
        Ok(result)
    }

    async fn arbor_turn(&self, session: &SessionState, handle: &StoredTreeHandle) -> Result<TurnResult, TurnError> {
        let evaluation = if handle.is_terminal(&session.current_node).unwrap_or(false) {
            Evaluation {
                final_node: session.current_node.clone(),
                hops: Vec::new(),
            }
        } else {
            self.evaluate_transitions(session, handle).await?
        };
        let scratchpad = evaluation.hops.last().map(|h| h.scratchpad.as_str()).unwrap_or_default();
        let generation = self
            .generate_message(session, handle, &evaluation.final_node, scratchpad)
            .await?;
        let total_usage: Usage = evaluation.hops.iter().map(|h| h.usage).sum::<Usage>() + generation.usage;
        Ok(TurnResult {
            strategy: Strategy::Arbor,
            final_node: evaluation.final_node,
            hops: evaluation.hops,
            message: generation.message,
            generation_reasoning: generation.reasoning,
            total_usage,
            total_latency_ms: 0,
            navigation_error: None,
        })
    }

    fn append_trace(&self, session: &SessionState, entries: &[TraceEntry]) {
        let Some(path) = &self.config.trace_path else {
            return;
        };
        if entries.is_empty() {
            return;
        }
        let _serial = self.trace_sink.lock().expect("trace sink");
        let mut body = String::new();
        for entry in entries {
            let line = TraceLine {
                session_id: &session.session_id,
                tree_id: &session.tree_id,
                tree_version: session.tree_version,
                entry,
            };
            body.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
            body.push('\n');
        }
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(body.as_bytes()));
        if let Err(e) = written {
            tracing::warn!(path = %path.display(), error = %e, "could not append hop trace");
        }
    }
}

/// `{"reasoning", "message"}`, or the whole reply as the message.
pub fn parse_generation(raw: &str) -> (String, String) {
    if let Some(obj) = extract_json_object(raw) {
        if let Some(message) = obj.get("message").and_then(|m| m.as_str()) {
            let reasoning = obj.get("reasoning").and_then(|r| r.as_str()).unwrap_or_default();
            return (message.trim().to_string(), reasoning.to_string());
        }
    }
    (raw.trim().to_string(), String::new())
}

/// Replays a hop list over the tree from `start`; `None` if any hop is not
/// an edge of the node it leaves or breaks the chain.
pub fn replay_hops(tree: &crate::tree::DecisionTree, start: &NodeKey, hops: &[HopRecord]) -> Option<NodeKey> {
    let mut at = start.clone();
    for hop in hops {
        if hop.from_node != at {
            return None;
        }
        at = match &hop.chosen {
            HopChoice::Stay => at,
            HopChoice::Transition(k) => {
                let edge = tree.edge(k)?;
                if edge.node_from != at {
                    return None;
                }
                edge.node_to.clone()
            }
        };
    }
    Some(at)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decisions() {
        let d = parse_evaluator_output(r#"{"scratchpad":"answered yes","next_state":"t1"}"#, &["t1", "t2"], "A").unwrap();
        assert_eq!(d.next_state, HopChoice::Transition("t1".into()));
        assert_eq!(d.scratchpad, "answered yes");
        let d = parse_evaluator_output(
            r#"{"scratchpad":"need clarification","next_state":"<stay>"}"#,
            &["t1", "t2"],
            "<stay>",
        )
        .unwrap();
        assert_eq!(d.next_state, HopChoice::Stay);
        let e = parse_evaluator_output(r#"{"scratchpad":"","next_state":"t9"}"#, &["t1", "t2"], "A").unwrap_err();
        assert!(matches!(e, DecisionError::InvalidTransition { ref next_state, .. } if next_state == "t9"));
        assert!(matches!(
            parse_evaluator_output("stay", &["t1"], "A"),
            Err(DecisionError::MalformedDecision(_))
        ));
        assert!(matches!(
            parse_evaluator_output(r#"{"scratchpad":"x"}"#, &["t1"], "A"),
            Err(DecisionError::MalformedDecision(_))
        ));
    }

    #[test]
    fn tolerant_of_fences_and_quotes() {
        let raw = "Here you go:\n```json\n{\"scratchpad\": \"ok\", \"next_state\": \"'A'\"}\n```";
        assert_eq!(parse_evaluator_output(raw, &["t1"], "A").unwrap().next_state, HopChoice::Stay);
        // A transition key equal to the stay key resolves to stay.
        assert_eq!(
            parse_evaluator_output(r#"{"next_state":"A"}"#, &["A"], "A").unwrap().next_state,
            HopChoice::Stay
        );
    }

    #[test]
    fn generation_parsing() {
        assert_eq!(
            parse_generation(r#"{"reasoning":"r","message":"Does it hurt?"}"#),
            ("Does it hurt?".to_string(), "r".to_string())
        );
        assert_eq!(
            parse_generation("Does the pain worsen at night?"),
            ("Does the pain worsen at night?".to_string(), String::new())
        );
    }
}

//! The single-prompt comparator: the whole tree goes into one system prompt
//! and the model tracks its own position.

use serde::Serialize;

use crate::gateway::{Gateway, StepTag};
use crate::orchestrator::{base_context, OrchestratorConfig, TurnError};
use crate::session::{SessionState, Strategy, TurnResult};
use crate::store::StoredTreeHandle;
use crate::template::{extract_json_object, PromptSet};
use crate::tree::{DecisionTree, NodeKey, NodeRole};

#[derive(Serialize)]
struct TreeJson<'a> {
    entry: &'a str,
    nodes: Vec<NodeJson<'a>>,
}

#[derive(Serialize)]
struct NodeJson<'a> {
    key: &'a str,
    role: NodeRole,
    question: String,
    question_explanation: &'a str,
    tree_context: &'a str,
    children: Vec<ChildJson<'a>>,
}

#[derive(Serialize)]
struct ChildJson<'a> {
    transition_key: &'a str,
    answer: &'a str,
    node_to: &'a str,
    question: &'a str,
    extra_context: &'a str,
}

/// Deterministic JSON view of the whole tree: every node in key order with
/// its texts and its children in stored edge order.
pub fn serialize_tree(tree: &DecisionTree) -> String {
    let nodes = tree
        .nodes()
        .iter()
        .map(|key| {
            let meta = tree.node_meta().get(key);
            let children = tree
                .outgoing(key)
                .expect("key is a node")
                .into_iter()
                .map(|e| ChildJson {
                    transition_key: &e.transition_key,
                    answer: &e.answer,
                    node_to: e.node_to.as_str(),
                    question: &e.question,
                    extra_context: &e.extra_context,
                })
                .collect();
            NodeJson {
                key: key.as_str(),
                role: tree.role(key).expect("key is a node"),
                question: tree.node_question(key).expect("key is a node"),
                question_explanation: meta.map_or("", |m| m.question_explanation.as_str()),
                tree_context: meta.map_or("", |m| m.tree_context.as_str()),
                children,
            }
        })
        .collect();
    let doc = TreeJson {
        entry: tree.entry().as_str(),
        nodes,
    };
    serde_json::to_string_pretty(&doc).expect("tree view serializes")
}

/// `{"message", "new_current_node", "reasoning"}` as returned by the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineReply {
    pub message: String,
    /// Verbatim; checked against the tree by the caller.
    pub new_current_node: String,
    pub reasoning: String,
}

pub fn parse_baseline_reply(raw: &str) -> Result<BaselineReply, TurnError> {
    let obj = extract_json_object(raw).ok_or_else(|| TurnError::MalformedDecision("no JSON object in reply".into()))?;
    let field = |name: &str| obj.get(name).and_then(|v| v.as_str()).map(str::to_string);
    let message = field("message").ok_or_else(|| TurnError::MalformedDecision("missing string field message".into()))?;
    let new_current_node = field("new_current_node")
        .ok_or_else(|| TurnError::MalformedDecision("missing string field new_current_node".into()))?;
    Ok(BaselineReply {
        message,
        new_current_node,
        reasoning: field("reasoning").unwrap_or_default(),
    })
}

/// Renders the full-tree system prompt for `session`.
pub fn baseline_prompt(prompts: &PromptSet, config: &OrchestratorConfig, session: &SessionState, tree: &DecisionTree) -> String {
    let mut ctx = base_context(session, config.history_window);
    ctx.set("current_node", session.current_node.as_str())
        .set("full_tree", serialize_tree(tree));
    prompts.baseline.render(&ctx)
}

/// One baseline call. A node key naming no node leaves the position
/// unchanged and is reported as a navigation error.
pub async fn baseline_turn(
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &OrchestratorConfig,
    session: &SessionState,
    handle: &StoredTreeHandle,
) -> Result<TurnResult, TurnError> {
    let request = config.request(StepTag::Baseline, baseline_prompt(prompts, config, session, handle.tree()));
    let response = gateway.complete(&request).await?;
    let reply = parse_baseline_reply(&response.text)?;
    let claimed = reply.new_current_node.trim();
    let (final_node, navigation_error) = match NodeKey::new(claimed) {
        Ok(k) if handle.contains(k.as_str()) => (k, None),
        _ => {
            tracing::info!(claimed = %reply.new_current_node, "baseline returned an undefined node");
            (session.current_node.clone(), Some(reply.new_current_node.clone()))
        }
    };
    Ok(TurnResult {
        strategy: Strategy::Baseline,
        final_node,
        hops: Vec::new(),
        message: reply.message,
        generation_reasoning: reply.reasoning,
        total_usage: response.usage,
        total_latency_ms: response.latency_ms,
        navigation_error,
    })
}

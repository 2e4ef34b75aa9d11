//! Replay of annotated turns against either strategy, and the metrics
//! computed from the replayed records.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::orchestrator::{NewSession, Orchestrator};
use crate::session::{Strategy, Utterance};
use crate::store::StoredTreeHandle;
use crate::tree::{DecisionTree, NodeKey};

pub mod metrics;
pub mod report;
pub mod stats;

pub use metrics::{
    aggregate_summary, cost_per_turn, summarize, turn_accuracy, AggregateRow, CellSummary, Deltas, MetricsError,
    MetricsSummary, Rate, RateTable,
};
pub use report::{emit_report, parse_cells_csv, render_report, ReportFormat};
pub use stats::{quality_stats, wilcoxon_signed_rank, wilcoxon_with, QualityDistribution, WilcoxonMethod, WilcoxonResult, EXACT_LIMIT};

/// One annotated turn: where the conversation stood, what the user said,
/// and the node the agent should end at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTurn {
    pub turn_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    #[serde(default)]
    pub conversation_prefix: Vec<Utterance>,
    #[serde(default)]
    pub external_context: BTreeMap<String, serde_json::Value>,
    pub current_node: NodeKey,
    pub target_node: NodeKey,
    pub user_message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{0}")]
    Io(String),
    #[error("dataset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("turn '{turn_id}': node '{node}' is not in tree '{tree_id}'")]
    UnknownNode {
        turn_id: String,
        node: NodeKey,
        tree_id: String,
    },
}

/// Parses JSON lines and checks every node reference against `tree`.
pub fn parse_dataset(text: &str, tree: &DecisionTree) -> Result<Vec<AnnotatedTurn>, DatasetError> {
    let mut turns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let turn: AnnotatedTurn = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        for node in [&turn.current_node, &turn.target_node] {
            if !tree.contains(node.as_str()) {
                return Err(DatasetError::UnknownNode {
                    turn_id: turn.turn_id.clone(),
                    node: node.clone(),
                    tree_id: tree.tree_id().to_string(),
                });
            }
        }
        turns.push(turn);
    }
    Ok(turns)
}

pub fn load_dataset(path: &Path, tree: &DecisionTree) -> Result<Vec<AnnotatedTurn>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text, tree)
}

pub fn dataset_to_jsonl(turns: &[AnnotatedTurn]) -> String {
    let mut out = String::new();
    for t in turns {
        out.push_str(&serde_json::to_string(t).expect("turn serializes"));
        out.push('\n');
    }
    out
}

/// Outcome of one replayed turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub turn_id: String,
    pub run_index: u32,
    pub strategy: Strategy,
    pub model_id: String,
    pub target_node: String,
    /// Node the strategy ended at, or the undefined key the baseline named.
    pub reached_node: Option<String>,
    pub correct: bool,
    #[serde(default)]
    pub navigation_error: bool,
    pub latency_ms: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("repetitions must be at least 1")]
    NoRuns,
}

/// Replays every turn `runs` times, each from a fresh session seeded at the
/// turn's node and history. Turn failures become incorrect records.
pub async fn run_replay(
    orchestrator: &Orchestrator,
    handle: &StoredTreeHandle,
    strategy: Strategy,
    dataset: &[AnnotatedTurn],
    model_id: &str,
    runs: u32,
    rates: &RateTable,
) -> Result<Vec<EvalRecord>, ReplayError> {
    if runs == 0 {
        return Err(ReplayError::NoRuns);
    }
    let mut records = Vec::with_capacity(dataset.len() * runs as usize);
    for run_index in 1..=runs {
        for turn in dataset {
            records.push(replay_one(orchestrator, handle, strategy, turn, model_id, run_index, rates).await);
        }
    }
    Ok(records)
}

async fn replay_one(
    orchestrator: &Orchestrator,
    handle: &StoredTreeHandle,
    strategy: Strategy,
    turn: &AnnotatedTurn,
    model_id: &str,
    run_index: u32,
    rates: &RateTable,
) -> EvalRecord {
    let mut record = EvalRecord {
        turn_id: turn.turn_id.clone(),
        run_index,
        strategy,
        model_id: model_id.to_string(),
        target_node: turn.target_node.to_string(),
        reached_node: None,
        correct: false,
        navigation_error: false,
        latency_ms: 0,
        input_tokens: 0,
        output_tokens: 0,
        cost_usd: None,
        error: None,
    };
    let session = orchestrator.create_session(NewSession {
        tree_id: handle.tree_id().to_string(),
        version: Some(handle.version()),
        external_context: turn.external_context.clone(),
        start_node: Some(turn.current_node.to_string()),
        history: turn.conversation_prefix.clone(),
        session_id: None,
    });
    let outcome = match session {
        Ok(s) => orchestrator.handle_turn(&s.session_id, &turn.user_message, strategy).await,
        Err(e) => Err(e),
    };
    match outcome {
        Ok(result) => {
            record.navigation_error = result.navigation_error.is_some();
            let reached = result
                .navigation_error
                .clone()
                .unwrap_or_else(|| result.final_node.to_string());
            record.correct = !record.navigation_error && reached == record.target_node;
            record.reached_node = Some(reached);
            record.latency_ms = result.total_latency_ms;
            record.input_tokens = result.total_usage.input_tokens;
            record.output_tokens = result.total_usage.output_tokens;
            record.cost_usd = rates.cost(model_id, result.total_usage).ok();
        }
        Err(e) => {
            tracing::info!(turn = %turn.turn_id, run_index, error = %e, "replayed turn failed");
            record.error = Some(e.to_string());
            record.cost_usd = rates.cost(model_id, Default::default()).ok();
        }
    }
    record
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

//! Conversation state persisted between turns, and the per-turn records
//! produced by either navigation strategy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::gateway::Usage;
use crate::tree::NodeKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

/// A message without a timestamp, as carried in datasets and API bodies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// Navigation strategy for a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Retrieve local edges, evaluate transitions, then generate.
    Arbor,
    /// Whole tree in one prompt, one call.
    Baseline,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Arbor => "arbor",
            Strategy::Baseline => "baseline",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Arbor => "Arbor",
            Strategy::Baseline => "Baseline",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arbor" => Ok(Strategy::Arbor),
            "baseline" => Ok(Strategy::Baseline),
            other => Err(format!("unknown strategy '{other}' (expected arbor or baseline)")),
        }
    }
}

/// What the evaluator chose at one hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "transition_key", rename_all = "lowercase")]
pub enum HopChoice {
    Stay,
    Transition(String),
}

/// One evaluation iteration inside a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub from_node: NodeKey,
    pub chosen: HopChoice,
    pub to_node: NodeKey,
    pub scratchpad: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

/// A hop as stored in a session's trace, tagged with its turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub turn: u64,
    pub hop_index: usize,
    #[serde(flatten)]
    pub hop: HopRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub strategy: Strategy,
    pub final_node: NodeKey,
    pub hops: Vec<HopRecord>,
    pub message: String,
    pub generation_reasoning: String,
    pub total_usage: Usage,
    pub total_latency_ms: u64,
    /// Node key returned by the model that names no node in the tree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navigation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub tree_id: String,
    pub tree_version: u64,
    pub current_node: NodeKey,
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
    #[serde(default)]
    pub external_context: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub turn_counter: u64,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
}

impl SessionState {
    pub fn new(
        session_id: impl Into<String>,
        tree_id: impl Into<String>,
        tree_version: u64,
        current_node: NodeKey,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            tree_id: tree_id.into(),
            tree_version,
            current_node,
            history: Vec::new(),
            external_context: BTreeMap::new(),
            turn_counter: 0,
            trace: Vec::new(),
        }
    }

    /// Appends to the history, nudging the timestamp forward if the clock
    /// has not advanced since the previous entry.
    pub fn push_history(&mut self, speaker: Speaker, text: impl Into<String>) {
        let mut timestamp = Utc::now();
        if let Some(last) = self.history.last() {
            if timestamp <= last.timestamp {
                timestamp = last.timestamp + Duration::microseconds(1);
            }
        }
        self.history.push(HistoryEntry {
            speaker,
            text: text.into(),
            timestamp,
        });
    }

    pub fn history_is_ordered(&self) -> bool {
        self.history.windows(2).all(|w| w[0].timestamp < w[1].timestamp)
    }

    /// The most recent exchanges: `window` user/agent pairs, or everything.
    pub fn recent_history(&self, window: Option<usize>) -> &[HistoryEntry] {
        match window {
            Some(k) => {
                let keep = (k * 2).min(self.history.len());
                &self.history[self.history.len() - keep..]
            }
            None => &self.history,
        }
    }

    /// Hops of the given turn, in order.
    pub fn hops_of_turn(&self, turn: u64) -> Vec<&HopRecord> {
        self.trace
            .iter()
            .filter(|t| t.turn == turn)
            .map(|t| &t.hop)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_stays_strictly_ordered() {
        let mut s = SessionState::new("s", "t", 1, NodeKey::new("A").unwrap());
        for i in 0..100 {
            s.push_history(if i % 2 == 0 { Speaker::User } else { Speaker::Agent }, "x");
        }
        assert!(s.history_is_ordered());
        assert_eq!(s.recent_history(Some(2)).len(), 4);
        assert_eq!(s.recent_history(None).len(), 100);
        assert_eq!(s.recent_history(Some(500)).len(), 100);
    }

    #[test]
    fn hop_choice_wire_shape() {
        let json = serde_json::to_value(HopChoice::Transition("t1".into())).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "transition", "transition_key": "t1"}));
        let json = serde_json::to_value(HopChoice::Stay).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "stay"}));
        assert_eq!("baseline".parse::<Strategy>().unwrap(), Strategy::Baseline);
        assert!("both".parse::<Strategy>().is_err());
    }
}

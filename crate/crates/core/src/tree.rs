//! Canonical decision-tree types.
//!
//! A tree is an entry node plus an ordered list of [`TransitionEdge`]s. The
//! node set is never stored: it is derived from the entry and the edge
//! endpoints, so it cannot drift out of sync with the edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("invalid node key {0:?}: keys must be non-empty and carry no surrounding whitespace")]
    InvalidNodeKey(String),
    #[error("unknown node '{0}'")]
    UnknownNode(NodeKey),
    #[error("duplicate transition key '{0}'")]
    DuplicateKey(String),
    #[error("edge with empty transition key")]
    EmptyTransitionKey,
    #[error("malformed tree document: {0}")]
    Malformed(String),
}

/// Identifier of a node, compared byte-exact.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeKey(String);

impl NodeKey {
    pub fn new(key: impl Into<String>) -> Result<Self, TreeError> {
        let key = key.into();
        if key.is_empty() || key.trim() != key {
            return Err(TreeError::InvalidNodeKey(key));
        }
        Ok(Self(key))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeKey {
    type Error = TreeError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl TryFrom<&str> for NodeKey {
    type Error = TreeError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<NodeKey> for String {
    fn from(key: NodeKey) -> Self {
        key.0
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl std::borrow::Borrow<str> for NodeKey {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// One admissible transition: the atomic unit of tree logic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEdge {
    pub transition_key: String,
    pub node_from: NodeKey,
    pub node_to: NodeKey,
    /// Prompt or condition shown at this edge.
    #[serde(default)]
    pub question: String,
    /// Answer required to follow the edge.
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub extra_context: String,
    #[serde(default)]
    pub flags: BTreeMap<String, serde_json::Value>,
}

impl TransitionEdge {
    pub fn new(
        transition_key: impl Into<String>,
        node_from: NodeKey,
        node_to: NodeKey,
    ) -> Self {
        Self {
            transition_key: transition_key.into(),
            node_from,
            node_to,
            question: String::new(),
            answer: String::new(),
            extra_context: String::new(),
            flags: BTreeMap::new(),
        }
    }

    pub fn with_question(mut self, question: impl Into<String>) -> Self {
        self.question = question.into();
        self
    }

    pub fn with_answer(mut self, answer: impl Into<String>) -> Self {
        self.answer = answer.into();
        self
    }
}

/// Role hint an author may attach to a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaRole {
    Question,
    Guidance,
    TerminalHint,
}

/// Optional per-node texts. Absent fields are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<MetaRole>,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub question_explanation: String,
    #[serde(default)]
    pub tree_context: String,
}

/// Communicative role of a node, derived from structure plus the author hint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Question,
    Guidance,
    Terminal,
}

/// Wire form of a tree. Field order here is the canonical JSON field order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDocument {
    pub tree_id: String,
    #[serde(default)]
    pub version: u64,
    pub entry: NodeKey,
    pub edges: Vec<TransitionEdge>,
    #[serde(default)]
    pub node_meta: BTreeMap<NodeKey, NodeMeta>,
}

/// Immutable, index-backed decision tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "TreeDocument", try_from = "TreeDocument")]
pub struct DecisionTree {
    tree_id: String,
    version: u64,
    entry: NodeKey,
    edges: Vec<TransitionEdge>,
    node_meta: BTreeMap<NodeKey, NodeMeta>,
    nodes: BTreeSet<NodeKey>,
    outgoing: BTreeMap<NodeKey, Vec<usize>>,
}

impl PartialEq for DecisionTree {
    fn eq(&self, other: &Self) -> bool {
        self.tree_id == other.tree_id
            && self.version == other.version
            && self.entry == other.entry
            && self.edges == other.edges
            && self.node_meta == other.node_meta
    }
}

impl TryFrom<TreeDocument> for DecisionTree {
    type Error = TreeError;

    fn try_from(doc: TreeDocument) -> Result<Self, Self::Error> {
        Self::new(doc.tree_id, doc.version, doc.entry, doc.edges, doc.node_meta)
    }
}

impl From<DecisionTree> for TreeDocument {
    fn from(tree: DecisionTree) -> Self {
        TreeDocument {
            tree_id: tree.tree_id,
            version: tree.version,
            entry: tree.entry,
            edges: tree.edges,
            node_meta: tree.node_meta,
        }
    }
}

impl DecisionTree {
    pub fn new(
        tree_id: impl Into<String>,
        version: u64,
        entry: NodeKey,
        edges: Vec<TransitionEdge>,
        node_meta: BTreeMap<NodeKey, NodeMeta>,
    ) -> Result<Self, TreeError> {
        let mut seen = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        let mut outgoing: BTreeMap<NodeKey, Vec<usize>> = BTreeMap::new();
        nodes.insert(entry.clone());
        for (idx, edge) in edges.iter().enumerate() {
            if edge.transition_key.is_empty() {
                return Err(TreeError::EmptyTransitionKey);
            }
            if !seen.insert(edge.transition_key.as_str()) {
                return Err(TreeError::DuplicateKey(edge.transition_key.clone()));
            }
            nodes.insert(edge.node_from.clone());
            nodes.insert(edge.node_to.clone());
            outgoing.entry(edge.node_from.clone()).or_default().push(idx);
        }
        Ok(Self {
            tree_id: tree_id.into(),
            version,
            entry,
            edges,
            node_meta,
            nodes,
            outgoing,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        serde_json::from_str(text).map_err(|e| TreeError::Malformed(e.to_string()))
    }

    /// Canonical JSON: document field order, edges in stored order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree documents always serialize")
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn with_tree_id(mut self, tree_id: impl Into<String>) -> Self {
        self.tree_id = tree_id.into();
        self
    }

    pub fn tree_id(&self) -> &str {
        &self.tree_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entry(&self) -> &NodeKey {
        &self.entry
    }

    pub fn edges(&self) -> &[TransitionEdge] {
        &self.edges
    }

    pub fn nodes(&self) -> &BTreeSet<NodeKey> {
        &self.nodes
    }

    pub fn node_meta(&self) -> &BTreeMap<NodeKey, NodeMeta> {
        &self.node_meta
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    pub fn node(&self, key: &str) -> Result<&NodeKey, TreeError> {
        self.nodes
            .get(key)
            .ok_or_else(|| TreeError::UnknownNode(NodeKey(key.to_string())))
    }

    pub fn edge(&self, transition_key: &str) -> Option<&TransitionEdge> {
        self.edges.iter().find(|e| e.transition_key == transition_key)
    }

    /// Edges leaving `node`, in stored order.
    pub fn outgoing(&self, node: &NodeKey) -> Result<Vec<&TransitionEdge>, TreeError> {
        if !self.nodes.contains(node) {
            return Err(TreeError::UnknownNode(node.clone()));
        }
        Ok(self
            .outgoing
            .get(node)
            .map(|idx| idx.iter().map(|&i| &self.edges[i]).collect())
            .unwrap_or_default())
    }

    pub fn out_degree(&self, node: &NodeKey) -> Result<usize, TreeError> {
        if !self.nodes.contains(node) {
            return Err(TreeError::UnknownNode(node.clone()));
        }
        Ok(self.outgoing.get(node).map_or(0, Vec::len))
    }

    pub fn is_terminal(&self, node: &NodeKey) -> Result<bool, TreeError> {
        Ok(self.out_degree(node)? == 0)
    }

    pub fn meta(&self, node: &NodeKey) -> NodeMeta {
        self.node_meta.get(node).cloned().unwrap_or_default()
    }

    /// Terminal is structural; otherwise the author hint decides between
    /// question and guidance. A terminal hint on a node with outgoing edges
    /// is ignored.
    pub fn role(&self, node: &NodeKey) -> Result<NodeRole, TreeError> {
        if self.is_terminal(node)? {
            return Ok(NodeRole::Terminal);
        }
        Ok(match self.node_meta.get(node).and_then(|m| m.role) {
            Some(MetaRole::Guidance) => NodeRole::Guidance,
            _ => NodeRole::Question,
        })
    }

    /// The question shown at a node: its own metadata text, else the first
    /// non-empty question on its outgoing edges.
    pub fn node_question(&self, node: &NodeKey) -> Result<String, TreeError> {
        let meta = self.node_meta.get(node);
        if let Some(q) = meta.map(|m| &m.question).filter(|q| !q.is_empty()) {
            return Ok(q.clone());
        }
        Ok(self
            .outgoing(node)?
            .into_iter()
            .map(|e| e.question.as_str())
            .find(|q| !q.is_empty())
            .unwrap_or_default()
            .to_string())
    }

    /// Node identifiers that count as declared for reference checks.
    ///
    /// With node metadata present: the entry, every metadata key, and every
    /// edge source. Without any metadata the tree carries no declarations and
    /// every endpoint is taken as defined.
    pub fn defined_nodes(&self) -> BTreeSet<NodeKey> {
        if self.node_meta.is_empty() {
            return self.nodes.clone();
        }
        let mut defined: BTreeSet<NodeKey> = self.node_meta.keys().cloned().collect();
        defined.insert(self.entry.clone());
        defined.extend(self.edges.iter().map(|e| e.node_from.clone()));
        defined
    }

    pub fn graph(&self) -> NodeGraph {
        NodeGraph::from_edges(
            self.nodes.iter().cloned().collect(),
            self.edges.iter().map(|e| (&e.node_from, &e.node_to)),
        )
    }

    pub fn stats(&self) -> TreeStats {
        tree_stats(self)
    }
}

/// Dense adjacency view of a tree, nodes indexed in key order.
#[derive(Debug, Clone)]
pub struct NodeGraph {
    pub keys: Vec<NodeKey>,
    pub succ: Vec<Vec<usize>>,
}

impl NodeGraph {
    pub fn from_edges<'a>(
        keys: Vec<NodeKey>,
        edges: impl IntoIterator<Item = (&'a NodeKey, &'a NodeKey)>,
    ) -> Self {
        let index: BTreeMap<&NodeKey, usize> =
            keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut succ = vec![Vec::new(); keys.len()];
        for (from, to) in edges {
            succ[index[from]].push(index[to]);
        }
        drop(index);
        Self { keys, succ }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &NodeKey) -> Option<usize> {
        self.keys.binary_search(key).ok()
    }

    pub fn transposed(&self) -> Vec<Vec<usize>> {
        let mut pred = vec![Vec::new(); self.len()];
        for (u, vs) in self.succ.iter().enumerate() {
            for &v in vs {
                pred[v].push(u);
            }
        }
        pred
    }

    /// Breadth-first reachable set from `start`.
    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.succ[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub max_depth: usize,
    /// `edge_count / node_count`.
    pub mean_out_degree: f64,
    /// `edge_count / non-terminal node count`, zero for an edgeless tree.
    pub mean_out_degree_non_terminal: f64,
}

pub fn tree_stats(tree: &DecisionTree) -> TreeStats {
    let node_count = tree.nodes.len();
    let edge_count = tree.edges.len();
    let non_terminal = tree.outgoing.len();
    TreeStats {
        node_count,
        edge_count,
        max_depth: max_depth(tree),
        mean_out_degree: edge_count as f64 / node_count as f64,
        mean_out_degree_non_terminal: if non_terminal == 0 {
            0.0
        } else {
            edge_count as f64 / non_terminal as f64
        },
    }
}

/// Longest simple path (in edges) starting at the entry.
///
/// Acyclic reachable subgraphs take the linear-time topological route;
/// otherwise simple paths are enumerated by backtracking.
fn max_depth(tree: &DecisionTree) -> usize {
    let graph = tree.graph();
    let start = graph.index_of(&tree.entry).expect("entry is a node");
    let reachable = graph.reachable_from(start);

    let mut indeg = vec![0usize; graph.len()];
    for (u, vs) in graph.succ.iter().enumerate() {
        if reachable[u] {
            for &v in vs {
                indeg[v] += 1;
            }
        }
    }
    let mut on_path = vec![false; graph.len()];
    if indeg[start] > 0 {
        return longest_simple_path(&graph.succ, start, &mut on_path);
    }
    let mut order = Vec::with_capacity(graph.len());
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &graph.succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    let reachable_count = reachable.iter().filter(|r| **r).count();
    if order.len() == reachable_count {
        let mut depth = vec![0usize; graph.len()];
        for &u in &order {
            for &v in &graph.succ[u] {
                depth[v] = depth[v].max(depth[u] + 1);
            }
        }
        return order.iter().map(|&u| depth[u]).max().unwrap_or(0);
    }

    longest_simple_path(&graph.succ, start, &mut on_path)
}

fn longest_simple_path(succ: &[Vec<usize>], u: usize, on_path: &mut [bool]) -> usize {
    on_path[u] = true;
    let mut best = 0;
    for &v in &succ[u] {
        if !on_path[v] {
            best = best.max(1 + longest_simple_path(succ, v, on_path));
        }
    }
    on_path[u] = false;
    best
}

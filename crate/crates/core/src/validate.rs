//! Structural checks run before a tree is stored: orphan detection,
//! reference integrity, and unescapable-loop detection over Kosaraju SCCs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tree::{DecisionTree, NodeGraph, NodeKey, TransitionEdge};

/// An edge endpoint that names no defined node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DanglingReference {
    pub transition_key: String,
    pub missing: NodeKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub orphans: BTreeSet<NodeKey>,
    pub dangling_edges: Vec<DanglingReference>,
    pub unescapable_loops: Vec<BTreeSet<NodeKey>>,
    pub is_valid: bool,
}

impl ValidationReport {
    pub fn new(
        orphans: BTreeSet<NodeKey>,
        dangling_edges: Vec<DanglingReference>,
        unescapable_loops: Vec<BTreeSet<NodeKey>>,
    ) -> Self {
        let is_valid = orphans.is_empty() && dangling_edges.is_empty() && unescapable_loops.is_empty();
        Self {
            orphans,
            dangling_edges,
            unescapable_loops,
            is_valid,
        }
    }

    /// One line per finding, for logs and CLI output.
    pub fn findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for o in &self.orphans {
            out.push(format!("orphan node '{o}' is unreachable from the entry"));
        }
        for d in &self.dangling_edges {
            out.push(format!(
                "reference integrity: edge '{}' references undefined node '{}'",
                d.transition_key, d.missing
            ));
        }
        for l in &self.unescapable_loops {
            let members: Vec<&str> = l.iter().map(NodeKey::as_str).collect();
            out.push(format!("unescapable loop over {{{}}}", members.join(", ")));
        }
        out
    }
}

/// Strongly connected components, each a disjoint node set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SccPartition {
    pub components: Vec<BTreeSet<NodeKey>>,
}

impl SccPartition {
    /// Components in a canonical order, for order-insensitive comparison.
    pub fn normalized(&self) -> Vec<BTreeSet<NodeKey>> {
        let mut c = self.components.clone();
        c.sort();
        c
    }
}

/// Nodes not reachable from the entry. The entry itself is never an orphan.
pub fn detect_orphans(tree: &DecisionTree) -> BTreeSet<NodeKey> {
    let graph = tree.graph();
    let start = graph.index_of(tree.entry()).expect("entry is a node");
    let seen = graph.reachable_from(start);
    graph
        .keys
        .iter()
        .zip(seen)
        .filter(|(_, reached)| !reached)
        .map(|(k, _)| k.clone())
        .collect()
}

/// Every edge endpoint missing from `defined`, source checked before target.
pub fn check_reference_integrity(
    edges: &[TransitionEdge],
    defined: &BTreeSet<NodeKey>,
) -> Vec<DanglingReference> {
    let mut out = Vec::new();
    for edge in edges {
        for endpoint in [&edge.node_from, &edge.node_to] {
            if !defined.contains(endpoint) {
                out.push(DanglingReference {
                    transition_key: edge.transition_key.clone(),
                    missing: endpoint.clone(),
                });
            }
        }
    }
    out
}

/// Kosaraju over the tree's node graph.
pub fn kosaraju_scc(tree: &DecisionTree) -> SccPartition {
    let graph = tree.graph();
    let components = kosaraju_components(&graph)
        .into_iter()
        .map(|members| members.into_iter().map(|i| graph.keys[i].clone()).collect())
        .collect();
    SccPartition { components }
}

/// Component index lists, in topological order of the condensation.
///
/// Both passes are iterative so deep chains cannot overflow the stack.
pub fn kosaraju_components(graph: &NodeGraph) -> Vec<Vec<usize>> {
    let n = graph.len();

    // Pass 1: post-order finish times on the forward graph.
    let mut visited = vec![false; n];
    let mut finished = Vec::with_capacity(n);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if visited[root] {
            continue;
        }
        visited[root] = true;
        stack.push((root, 0));
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if let Some(&v) = graph.succ[u].get(*next) {
                *next += 1;
                if !visited[v] {
                    visited[v] = true;
                    stack.push((v, 0));
                }
            } else {
                finished.push(u);
                stack.pop();
            }
        }
    }

    // Pass 2: flood the transposed graph in reverse finish order.
    let pred = graph.transposed();
    let mut assigned = vec![false; n];
    let mut components = Vec::new();
    let mut frontier = Vec::new();
    for &root in finished.iter().rev() {
        if assigned[root] {
            continue;
        }
        assigned[root] = true;
        frontier.push(root);
        let mut component = Vec::new();
        while let Some(u) = frontier.pop() {
            component.push(u);
            for &v in &pred[u] {
                if !assigned[v] {
                    assigned[v] = true;
                    frontier.push(v);
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}

/// Cyclic components with no edge leaving them.
///
/// A single-node component is cyclic only through an explicit self-loop.
pub fn detect_unescapable_loops(tree: &DecisionTree) -> Vec<BTreeSet<NodeKey>> {
    let graph = tree.graph();
    let components = kosaraju_components(&graph);
    let mut component_of = vec![0usize; graph.len()];
    for (c, members) in components.iter().enumerate() {
        for &u in members {
            component_of[u] = c;
        }
    }
    components
        .iter()
        .enumerate()
        .filter(|(c, members)| {
            let cyclic = members.len() > 1 || graph.succ[members[0]].contains(&members[0]);
            let escapes = members
                .iter()
                .any(|&u| graph.succ[u].iter().any(|&v| component_of[v] != *c));
            cyclic && !escapes
        })
        .map(|(_, members)| members.iter().map(|&i| graph.keys[i].clone()).collect())
        .collect()
}

/// All three checks over the full node set, orphans included.
pub fn validate(tree: &DecisionTree) -> ValidationReport {
    ValidationReport::new(
        detect_orphans(tree),
        check_reference_integrity(tree.edges(), &tree.defined_nodes()),
        detect_unescapable_loops(tree),
    )
}

//! Seeded generators for layered decision trees, annotated datasets over
//! them, and ground-truth scripts for the scripted backend.
//!
//! Node `N0000` is the entry with exactly three children `N0001..N0003`
//! through edges `T0001..T0003`. Every text is a function of the seed and
//! the node or edge index alone, so trees of different sizes built from one
//! seed share the entry's neighbourhood byte for byte.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::eval::AnnotatedTurn;
use crate::gateway::{ScriptStep, StepTag};
use crate::session::{Speaker, Strategy, Utterance};
use crate::tree::{DecisionTree, MetaRole, NodeKey, NodeMeta, TransitionEdge};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSpec {
    pub tree_id: String,
    pub nodes: usize,
    pub edges: usize,
    /// Longest entry-to-terminal path.
    pub depth: usize,
    pub seed: u64,
}

impl TreeSpec {
    /// 449 nodes, 980 edges, depth 19.
    pub fn reference() -> Self {
        Self {
            tree_id: "synthetic".into(),
            nodes: 449,
            edges: 980,
            depth: 19,
            seed: 7,
        }
    }

    /// Same edge density as the reference tree at another size.
    pub fn with_nodes(nodes: usize) -> Self {
        Self {
            nodes,
            edges: ((nodes as f64) * 980.0 / 449.0).round() as usize,
            ..Self::reference()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthError {
    #[error("{0}")]
    Infeasible(String),
}

pub fn node_key(i: usize) -> NodeKey {
    NodeKey::new(format!("N{i:04}")).expect("generated keys are valid")
}

fn edge_key(k: usize) -> String {
    format!("T{k:04}")
}

fn rng_for(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

const WORDS: [&str; 48] = [
    "pain", "knee", "lower", "back", "shoulder", "sharp", "dull", "morning", "night", "swelling", "numbness", "weeks",
    "recent", "injury", "fall", "lifting", "walking", "stairs", "sitting", "standing", "radiating", "leg", "arm",
    "tingling", "stiffness", "fever", "weight", "loss", "bladder", "bowel", "changes", "surgery", "history",
    "medication", "relief", "worse", "better", "constant", "intermittent", "severe", "mild", "moderate", "daily",
    "activity", "sleep", "work", "exercise", "balance",
];

fn phrase(seed: u64, salt: u64, index: usize, min: usize, max: usize) -> String {
    let mut rng = rng_for(seed, salt, index as u64);
    let n = rng.random_range(min..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn node_meta(seed: u64, i: usize, terminal: bool) -> NodeMeta {
    let role = if terminal {
        MetaRole::TerminalHint
    } else if i % 9 == 5 {
        MetaRole::Guidance
    } else {
        MetaRole::Question
    };
    NodeMeta {
        role: Some(role),
        question: format!("Does the member report {}?", phrase(seed, 1, i, 3, 7)),
        question_explanation: format!("Establish {} before moving on.", phrase(seed, 2, i, 4, 9)),
        tree_context: phrase(seed, 3, i, 2, 6),
    }
}

fn edge(seed: u64, k: usize, from: usize, to: usize) -> TransitionEdge {
    let mut e = TransitionEdge::new(edge_key(k), node_key(from), node_key(to))
        .with_question(format!("Is there {}?", phrase(seed, 4, k, 2, 5)))
        .with_answer(format!("member confirms {}", phrase(seed, 5, k, 2, 6)));
    e.extra_context = phrase(seed, 6, k, 0, 4);
    e
}

/// Layered DAG: levels `0..=depth`, every node reachable from the entry and
/// one node on every level, so the longest path has exactly `depth` edges.
pub fn generate_tree(spec: &TreeSpec) -> Result<DecisionTree, SynthError> {
    let TreeSpec {
        nodes: n,
        edges: e_total,
        depth,
        seed,
        ..
    } = *spec;
    if depth < 2 || n < depth + 3 {
        return Err(SynthError::Infeasible(format!(
            "{n} nodes cannot span depth {depth} with a three-way entry"
        )));
    }
    if e_total < n - 1 {
        return Err(SynthError::Infeasible(format!("{e_total} edges cannot connect {n} nodes")));
    }
    let mut level = vec![0usize; n];
    for l in level.iter_mut().take(4).skip(1) {
        *l = 1;
    }
    let rest = n - 4;
    let span = depth - 1;
    for j in 0..rest {
        level[4 + j] = 2 + j * span / rest;
    }
    // Levels are non-decreasing in node index.
    let mut first_of = vec![usize::MAX; depth + 1];
    let mut end_of = vec![0usize; depth + 1];
    for (i, &l) in level.iter().enumerate() {
        first_of[l] = first_of[l].min(i);
        end_of[l] = i + 1;
    }

    let mut edges = Vec::with_capacity(e_total);
    let mut pairs = BTreeSet::new();
    let mut next_key = 1;
    let mut push = |edges: &mut Vec<TransitionEdge>, pairs: &mut BTreeSet<(usize, usize)>, from, to| {
        pairs.insert((from, to));
        edges.push(edge(seed, next_key, from, to));
        next_key += 1;
    };
    for child in 1..=3 {
        push(&mut edges, &mut pairs, 0, child);
    }
    for (i, &l) in level.iter().enumerate().take(n).skip(4) {
        let mut rng = rng_for(seed, 7, i as u64);
        let parent = rng.random_range(first_of[l - 1]..end_of[l - 1]);
        push(&mut edges, &mut pairs, parent, i);
    }
    let mut rng = rng_for(seed, 8, n as u64);
    let mut attempts = 0usize;
    let needed = e_total - edges.len();
    while edges.len() < e_total {
        attempts += 1;
        if attempts > 200 * needed.max(1) + 1000 {
            return Err(SynthError::Infeasible(format!("could not place {e_total} distinct forward edges")));
        }
        let u = rng.random_range(1..first_of[depth]);
        let lo = level[u] + 1;
        let hi = (level[u] + 2).min(depth);
        let v = rng.random_range(first_of[lo]..end_of[hi]);
        if pairs.contains(&(u, v)) {
            continue;
        }
        push(&mut edges, &mut pairs, u, v);
    }

    let sources: BTreeSet<usize> = pairs.iter().map(|(u, _)| *u).collect();
    let meta: BTreeMap<NodeKey, NodeMeta> = (0..n)
        .map(|i| (node_key(i), node_meta(seed, i, !sources.contains(&i))))
        .collect();
    DecisionTree::new(spec.tree_id.clone(), 0, node_key(0), edges, meta).map_err(|e| SynthError::Infeasible(e.to_string()))
}

/// Fewest-edge route from `from` to `to`, ties broken by stored edge order.
pub fn shortest_path<'a>(tree: &'a DecisionTree, from: &NodeKey, to: &NodeKey) -> Option<Vec<&'a TransitionEdge>> {
    let mut prev: BTreeMap<&NodeKey, &TransitionEdge> = BTreeMap::new();
    let mut seen: BTreeSet<&NodeKey> = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u == to {
            let mut path = Vec::new();
            let mut at = to;
            while at != from {
                let e = prev[at];
                path.push(e);
                at = &e.node_from;
            }
            path.reverse();
            return Some(path);
        }
        for e in tree.outgoing(u).ok()? {
            if seen.insert(&e.node_to) {
                prev.insert(&e.node_to, e);
                queue.push_back(&e.node_to);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub conversations: usize,
    pub turns: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// 174 turns over 20 conversations.
    fn default() -> Self {
        Self {
            conversations: 20,
            turns: 174,
            seed: 11,
        }
    }
}

/// Edges along the longest path from each node to a terminal.
fn heights(tree: &DecisionTree) -> BTreeMap<NodeKey, usize> {
    let graph = tree.graph();
    let mut memo: Vec<Option<usize>> = vec![None; graph.len()];
    // Reverse post-order DFS; the generated trees are DAGs.
    for root in 0..graph.len() {
        let mut stack = vec![(root, 0usize)];
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if memo[u].is_some() {
                stack.pop();
                continue;
            }
            if let Some(&v) = graph.succ[u].get(*next) {
                *next += 1;
                if memo[v].is_none() {
                    stack.push((v, 0));
                }
            } else {
                let h = graph.succ[u].iter().map(|&v| memo[v].unwrap_or(0) + 1).max().unwrap_or(0);
                memo[u] = Some(h);
                stack.pop();
            }
        }
    }
    graph.keys.iter().cloned().zip(memo.into_iter().map(|h| h.unwrap_or(0))).collect()
}

/// Conversations walking from the entry toward a terminal. A turn may stay
/// (an unclear answer), advance one edge, or advance two edges at once.
pub fn generate_dataset(tree: &DecisionTree, spec: &DatasetSpec) -> Vec<AnnotatedTurn> {
    let height = heights(tree);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut turns = Vec::with_capacity(spec.turns);
    let base = spec.turns / spec.conversations.max(1);
    let extra = spec.turns % spec.conversations.max(1);
    for c in 0..spec.conversations {
        let count = base + usize::from(c < extra);
        let budget = height[tree.entry()];
        let mut steps: Vec<usize> = Vec::with_capacity(count);
        let mut used = 0;
        for _ in 0..count {
            let roll: f64 = rng.random();
            let want = if roll < 0.15 {
                0
            } else if roll < 0.35 {
                2
            } else {
                1
            };
            let s = want.min(budget - used);
            used += s;
            steps.push(s);
        }
        // Walk exactly `used` edges, keeping enough height for what is left.
        let mut walk = vec![tree.entry().clone()];
        let mut taken: Vec<&TransitionEdge> = Vec::with_capacity(used);
        for r in (1..=used).rev() {
            let at = walk.last().expect("walk starts at entry");
            let options: Vec<&TransitionEdge> = tree
                .outgoing(at)
                .expect("walk stays in tree")
                .into_iter()
                .filter(|e| height[&e.node_to] + 1 >= r)
                .collect();
            let pick = options[rng.random_range(0..options.len())];
            walk.push(pick.node_to.clone());
            taken.push(pick);
        }
        let context: BTreeMap<String, serde_json::Value> = [
            ("member_id".to_string(), json!(format!("M{c:03}"))),
            ("local_time".to_string(), json!(format!("{:02}:{:02}", 8 + c % 10, (c * 7) % 60))),
            ("eligible".to_string(), json!(true)),
            ("risk_flags".to_string(), json!([])),
        ]
        .into_iter()
        .collect();

        let mut prefix: Vec<Utterance> = Vec::new();
        let mut pos = 0;
        for (j, &s) in steps.iter().enumerate() {
            let current = walk[pos].clone();
            let target = walk[pos + s].clone();
            prefix.push(Utterance {
                speaker: Speaker::Agent,
                text: tree.node_question(&current).unwrap_or_default(),
            });
            let user_message = if s == 0 {
                format!("I'm not sure what you mean about {}.", phrase(spec.seed, 9, c * 100 + j, 1, 3))
            } else {
                taken[pos..pos + s]
                    .iter()
                    .map(|e| e.answer.as_str())
                    .collect::<Vec<_>>()
                    .join(". Also, ")
            };
            turns.push(AnnotatedTurn {
                turn_id: format!("c{c:02}-t{j:02}"),
                conversation_id: Some(format!("c{c:02}")),
                conversation_prefix: prefix.clone(),
                external_context: context.clone(),
                current_node: current,
                target_node: target,
                user_message: user_message.clone(),
            });
            prefix.push(Utterance {
                speaker: Speaker::User,
                text: user_message,
            });
            pos += s;
        }
    }
    turns
}

/// Deterministic simulated latencies, in milliseconds.
fn latency(tag: StepTag, n: usize) -> u64 {
    let jitter = (n as u64).wrapping_mul(2_654_435_761) % 997;
    match tag {
        StepTag::Evaluation => 700 + jitter,
        StepTag::Generation => 1_500 + jitter,
        StepTag::Baseline => 6_000 + 4 * jitter,
    }
}

/// Replies a perfectly informed model would give when `dataset` is replayed
/// `runs` times with `strategy`, in consumption order per step stream.
pub fn oracle_script(tree: &DecisionTree, dataset: &[AnnotatedTurn], strategy: Strategy, runs: u32) -> Vec<ScriptStep> {
    let mut steps = Vec::new();
    let mut n = 0usize;
    let mut step = |tag: StepTag, text: String| {
        n += 1;
        ScriptStep {
            latency_ms: Some(latency(tag, n)),
            ..ScriptStep::reply(tag, text)
        }
    };
    for _ in 0..runs {
        for turn in dataset {
            let message = tree.node_question(&turn.target_node).unwrap_or_default();
            match strategy {
                Strategy::Baseline => {
                    let reply = json!({
                        "reasoning": format!("the member's answer leads to {}", turn.target_node),
                        "message": message,
                        "new_current_node": turn.target_node.as_str(),
                    });
                    steps.push(step(StepTag::Baseline, reply.to_string()));
                }
                Strategy::Arbor => {
                    if !tree.is_terminal(&turn.current_node).unwrap_or(true) {
                        let path = shortest_path(tree, &turn.current_node, &turn.target_node)
                            .expect("dataset targets are reachable");
                        for e in path {
                            let reply = json!({
                                "scratchpad": format!("{} is satisfied", e.answer),
                                "next_state": e.transition_key,
                            });
                            steps.push(step(StepTag::Evaluation, reply.to_string()));
                        }
                        if !tree.is_terminal(&turn.target_node).unwrap_or(true) {
                            let reply = json!({
                                "scratchpad": "the current question is still open",
                                "next_state": turn.target_node.as_str(),
                            });
                            steps.push(step(StepTag::Evaluation, reply.to_string()));
                        }
                    }
                    let reply = json!({"reasoning": "ask the node question", "message": message});
                    steps.push(step(StepTag::Generation, reply.to_string()));
                }
            }
        }
    }
    steps
}

pub fn script_to_jsonl(steps: &[ScriptStep]) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(&serde_json::to_string(s).expect("script step serializes"));
        out.push('\n');
    }
    out
}

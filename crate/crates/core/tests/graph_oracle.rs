#[path = "support/oracle.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use branchline::tree::{DecisionTree, NodeKey, TransitionEdge};
use branchline::validate::{check_reference_integrity, detect_orphans, detect_unescapable_loops, kosaraju_scc, validate};
use proptest::prelude::*;


fn name(i: usize) -> NodeKey {
    NodeKey::new(format!("V{i}")).unwrap()
}

fn build(edges: &[(usize, usize)], entry: usize) -> DecisionTree {
    let list = edges
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| TransitionEdge::new(format!("e{i}"), name(a), name(b)))
        .collect();
    DecisionTree::new("g", 1, name(entry), list, BTreeMap::new()).unwrap()
}

/// The tree's node set is the entry plus edge endpoints; vertices outside it
/// are dropped from oracle answers.
fn present(edges: &[(usize, usize)], entry: usize) -> BTreeSet<usize> {
    edges.iter().flat_map(|&(a, b)| [a, b]).chain([entry]).collect()
}

fn named(set: &BTreeSet<usize>) -> BTreeSet<NodeKey> {
    set.iter().map(|&i| name(i)).collect()
}

fn restrict(classes: Vec<BTreeSet<usize>>, keep: &BTreeSet<usize>) -> Vec<BTreeSet<NodeKey>> {
    let mut out: Vec<BTreeSet<NodeKey>> = classes
        .into_iter()
        .filter(|c| c.iter().all(|i| keep.contains(i)))
        .map(|c| named(&c))
        .collect();
    out.sort();
    out
}

fn digraph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, usize)> {
    (1usize..14).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..n), 0..(n * 3)),
            0..n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn orphans_match_reachability((n, edges, entry) in digraph()) {
        let t = build(&edges, entry);
        let keep = present(&edges, entry);
        let want: BTreeSet<usize> = oracle::bfs_orphans(n, &edges, entry).intersection(&keep).copied().collect();
        prop_assert_eq!(detect_orphans(&t), named(&want));
    }

    #[test]
    fn scc_partition_matches_mutual_reachability((n, edges, entry) in digraph()) {
        let t = build(&edges, entry);
        let want = restrict(oracle::sccs(n, &edges), &present(&edges, entry));
        prop_assert_eq!(kosaraju_scc(&t).normalized(), want);
    }

    #[test]
    fn traps_match_closed_cyclic_classes((n, edges, entry) in digraph()) {
        let t = build(&edges, entry);
        let mut got = detect_unescapable_loops(&t);
        got.sort();
        prop_assert_eq!(got, restrict(oracle::traps(n, &edges), &present(&edges, entry)));
    }

    #[test]
    fn report_is_the_conjunction((n, edges, entry) in digraph()) {
        let t = build(&edges, entry);
        let r = validate(&t);
        let keep = present(&edges, entry);
        let expected = oracle::orphans(n, &edges, entry).is_disjoint(&keep) && oracle::traps(n, &edges).is_empty();
        prop_assert_eq!(r.is_valid, expected);
    }

    #[test]
    fn dangling_references_are_exactly_undefined_endpoints(
        (n, edges, _entry) in digraph(),
        mask in prop::collection::vec(any::<bool>(), 14),
    ) {
        let t = build(&edges, 0);
        let defined: BTreeSet<NodeKey> = (0..n).filter(|&i| mask[i]).map(name).collect();
        let got = check_reference_integrity(t.edges(), &defined);
        let mut want = Vec::new();
        for (i, &(a, b)) in edges.iter().enumerate() {
            for end in [a, b] {
                if !mask[end] {
                    want.push((format!("e{i}"), name(end)));
                }
            }
        }
        let got: Vec<(String, NodeKey)> = got.into_iter().map(|d| (d.transition_key, d.missing)).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn long_chain_does_not_overflow() {
    let n = 20_000;
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).chain([(n - 1, 0)]).collect();
    let t = build(&edges, 0);
    assert_eq!(kosaraju_scc(&t).components.len(), 1);
    assert_eq!(detect_unescapable_loops(&t).len(), 1);
    assert!(detect_orphans(&t).is_empty());
}

use std::sync::Arc;

use branchline::gateway::{CharEstimateCounter, Gateway, ScriptStep, ScriptedBackend, StepTag};
use branchline::orchestrator::{NewSession, Orchestrator, OrchestratorConfig};
use branchline::session::Strategy;
use branchline::store::{EdgeStore, StoreError};
use branchline::synthetic::{generate_tree, TreeSpec};
use branchline::template::PromptSet;
use serde_json::json;
use sha2::{Digest, Sha256};

fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn orchestrator(store: Arc<EdgeStore>, steps: Vec<ScriptStep>) -> Orchestrator {
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(steps))).with_tokenizer(Arc::new(CharEstimateCounter));
    Orchestrator::new(store, Arc::new(gateway), PromptSet::default(), OrchestratorConfig::default())
}

#[tokio::test]
async fn sessions_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let tree = generate_tree(&TreeSpec::with_nodes(40)).unwrap();
    let first = tree.outgoing(tree.entry()).unwrap()[0].clone();
    let (session_id, before) = {
        let store = Arc::new(EdgeStore::open(dir.path()).unwrap());
        store.put_tree(tree.clone()).unwrap();
        let steps = vec![
            ScriptStep::reply(StepTag::Evaluation, json!({"scratchpad": "s", "next_state": first.transition_key}).to_string()),
            ScriptStep::reply(StepTag::Evaluation, json!({"scratchpad": "s", "next_state": first.node_to.as_str()}).to_string()),
            ScriptStep::reply(StepTag::Generation, "next question"),
        ];
        let orch = orchestrator(store.clone(), steps);
        let s = orch.create_session(NewSession::new("synthetic")).unwrap();
        orch.handle_turn(&s.session_id, "yes", Strategy::Arbor).await.unwrap();
        (s.session_id.clone(), store.load_session(&s.session_id).unwrap())
    };
    let reopened = EdgeStore::open(dir.path()).unwrap();
    let after = reopened.load_session(&session_id).unwrap();
    assert_eq!(after, before);
    assert_eq!(after.current_node, first.node_to);
    assert_eq!(after.history.len(), 2);
    assert_eq!(reopened.load_version("synthetic", Some(1)).unwrap().tree().edges(), tree.edges());
}

#[test]
fn stored_versions_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let tree = generate_tree(&TreeSpec::with_nodes(60)).unwrap();
    let v1_hash = {
        let store = EdgeStore::open(dir.path()).unwrap();
        let h = store.put_tree(tree.clone()).unwrap();
        assert_eq!(h.version(), 1);
        digest(&h.to_canonical_json())
    };
    let on_disk = std::fs::read_to_string(dir.path().join("trees/synthetic/1.json")).unwrap();
    assert_eq!(digest(&on_disk), v1_hash);

    let store = EdgeStore::open(dir.path()).unwrap();
    let mut edited: Vec<_> = tree.edges().to_vec();
    edited[0].answer = "changed".into();
    let v2 = branchline::tree::DecisionTree::new("synthetic", 0, tree.entry().clone(), edited, tree.node_meta().clone())
        .unwrap();
    assert_eq!(store.put_tree(v2).unwrap().version(), 2);
    assert_eq!(digest(&store.load_version("synthetic", Some(1)).unwrap().to_canonical_json()), v1_hash);
    assert_ne!(digest(&store.load_version("synthetic", None).unwrap().to_canonical_json()), v1_hash);
    assert_eq!(store.versions("synthetic"), vec![1, 2]);
}

#[test]
fn corrupt_session_document_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let store = EdgeStore::open(dir.path()).unwrap();
    std::fs::write(dir.path().join("sessions/broken.json"), "{ not json").unwrap();
    assert!(matches!(store.load_session("broken"), Err(StoreError::Corrupt { .. })));
    assert!(matches!(store.load_session("../etc"), Err(StoreError::InvalidSession(_))));
    assert!(matches!(store.load_session("absent"), Err(StoreError::NotFound(_))));
}

#[test]
fn unknown_versions_are_not_found() {
    let store = EdgeStore::in_memory();
    assert!(matches!(store.load_version("nope", None), Err(StoreError::NotFound(_))));
    store.put_tree(generate_tree(&TreeSpec::with_nodes(40)).unwrap()).unwrap();
    assert!(matches!(store.load_version("synthetic", Some(9)), Err(StoreError::NotFound(_))));
}

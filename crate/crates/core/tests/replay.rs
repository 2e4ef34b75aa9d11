use std::sync::Arc;

use branchline::eval::{run_replay, summarize, RateTable};
use branchline::gateway::{CharEstimateCounter, Gateway, ScriptedBackend, VirtualClock};
use branchline::orchestrator::{Orchestrator, OrchestratorConfig};
use branchline::session::Strategy;
use branchline::store::EdgeStore;
use branchline::synthetic::{generate_dataset, generate_tree, oracle_script, DatasetSpec, TreeSpec};
use branchline::template::PromptSet;

async fn replay(strategy: Strategy) -> Vec<branchline::eval::EvalRecord> {
    let tree = generate_tree(&TreeSpec::reference()).unwrap();
    let dataset = generate_dataset(&tree, &DatasetSpec::default());
    let script = oracle_script(&tree, &dataset, strategy, 5);
    let store = Arc::new(EdgeStore::in_memory());
    let handle = store.put_tree(tree).unwrap();
    let clock = Arc::new(VirtualClock::default());
    let backend = ScriptedBackend::new(script).with_virtual_clock(clock.clone());
    let gateway = Gateway::new(Arc::new(backend))
        .with_clock(clock)
        .with_tokenizer(Arc::new(CharEstimateCounter));
    let config = OrchestratorConfig::single_model("GPT-4.1");
    let orch = Orchestrator::new(store, Arc::new(gateway), PromptSet::default(), config);
    run_replay(&orch, &handle, strategy, &dataset, "GPT-4.1", 5, &RateTable::reference())
        .await
        .unwrap()
}

#[tokio::test]
async fn oracle_scripted_agent_is_perfect() {
    let records = replay(Strategy::Arbor).await;
    assert_eq!(records.len(), 870);
    let wrong: Vec<_> = records.iter().filter(|r| !r.correct).take(3).collect();
    assert!(wrong.is_empty(), "{wrong:?}");
    let cell = summarize(&records).unwrap();
    assert_eq!((cell.runs, cell.turns), (5, 174));
    assert_eq!(cell.accuracy_mean, 100.0);
    assert_eq!(cell.accuracy_sd, 0.0);
    assert!(cell.latency_mean_s > 1.5);
    assert!(cell.cost_mean_usd.unwrap() > 0.0);
}

#[tokio::test]
async fn oracle_scripted_baseline_is_perfect_and_deterministic() {
    let a = replay(Strategy::Baseline).await;
    assert_eq!(a.len(), 870);
    assert!(a.iter().all(|r| r.correct && r.error.is_none()));
    let b = replay(Strategy::Baseline).await;
    assert_eq!(
        branchline::eval::records_to_jsonl(&a),
        branchline::eval::records_to_jsonl(&b)
    );
}

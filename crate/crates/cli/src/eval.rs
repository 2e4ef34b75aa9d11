use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use branchline::eval::{
    load_dataset, parse_cells_csv, records_to_jsonl, render_report, run_replay, summarize, MetricsSummary, RateTable,
    ReportFormat,
};
use branchline::gateway::{BackendConfig, BackendKind, Gateway};
use branchline::orchestrator::Orchestrator;
use branchline::session::Strategy;
use branchline::store::EdgeStore;
use branchline_service::AppConfig;
use clap::Args;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Repeatable; every strategy is run for every model.
    #[arg(long, required = true)]
    strategy: Vec<Strategy>,
    /// JSON-lines annotated turns.
    #[arg(long)]
    dataset: PathBuf,
    /// Tree file; otherwise the latest stored version of --tree-id.
    #[arg(long, conflicts_with = "tree_id")]
    tree: Option<PathBuf>,
    #[arg(long)]
    tree_id: Option<String>,
    #[arg(long, default_value_t = 5)]
    runs: u32,
    /// Rate table JSON; the built-in reference table when omitted.
    #[arg(long)]
    rates: Option<PathBuf>,
    /// Repeatable model id, used for every step of its cells.
    #[arg(long)]
    model: Vec<String>,
    /// Scripted replies, replayed from the start for every cell on a virtual clock.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Per-turn records as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Cells CSV as written by `eval --format csv`.
    cells: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub async fn run(config: &AppConfig, args: EvalArgs) -> Result<ExitCode> {
    let tree = match (&args.tree, &args.tree_id) {
        (Some(path), _) => crate::read_tree(path)?,
        (None, Some(id)) => crate::open_store(config)?.load_version(id, None)?.tree().clone(),
        (None, None) => bail!("pass --tree FILE or --tree-id ID"),
    };
    let dataset = load_dataset(&args.dataset, &tree)?;
    let rates = match &args.rates {
        Some(p) => RateTable::load(p)?,
        None => RateTable::reference(),
    };
    let backend = match &args.script {
        Some(path) => BackendConfig {
            kind: BackendKind::Scripted {
                script: Some(path.clone()),
                steps: Vec::new(),
                virtual_clock: true,
            },
            ..config.backend.clone()
        },
        None => config.backend.clone(),
    };
    let models = if args.model.is_empty() {
        vec![config.orchestrator.evaluation_model.clone()]
    } else {
        args.model.clone()
    };

    let mut cells = Vec::new();
    let mut all = Vec::new();
    for model in &models {
        for &strategy in &args.strategy {
            let store = Arc::new(EdgeStore::in_memory());
            let handle = store.put_tree(tree.clone())?;
            let mut orch_config = config.orchestrator.clone();
            orch_config.evaluation_model = model.clone();
            orch_config.generation_model = model.clone();
            orch_config.baseline_model = model.clone();
            orch_config.trace_path = None;
            let gateway = Gateway::from_config(&backend)?;
            let orch = Orchestrator::new(store, Arc::new(gateway), config.prompts()?, orch_config);
            let records = run_replay(&orch, &handle, strategy, &dataset, model, args.runs, &rates).await?;
            let cell = summarize(&records).with_context(|| format!("summarizing {model}/{strategy}"))?;
            eprintln!(
                "{model} {strategy}: {} records, accuracy {:.2}%",
                records.len(),
                cell.accuracy_mean
            );
            cells.push(cell);
            all.extend(records);
        }
    }
    if let Some(path) = &args.records {
        std::fs::write(path, records_to_jsonl(&all)).with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = MetricsSummary::from_cells(cells);
    crate::emit(args.out.as_deref(), &render_report(&summary, args.format))?;
    Ok(ExitCode::SUCCESS)
}

pub fn aggregate(args: AggregateArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.cells).with_context(|| format!("reading {}", args.cells.display()))?;
    let cells = parse_cells_csv(&text).map_err(anyhow::Error::msg)?;
    let summary = MetricsSummary::from_cells(cells);
    crate::emit(args.out.as_deref(), &render_report(&summary, args.format))?;
    Ok(ExitCode::SUCCESS)
}

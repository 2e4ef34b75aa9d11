mod chat;
mod eval;
mod remote;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use branchline::ingest::{ingest, lint, to_csv, NormalizeOptions, NormalizerRegistry, SourceDocument, SourceFormat};
use branchline::session::Strategy;
use branchline::synthetic::{generate_dataset, generate_tree, oracle_script, script_to_jsonl, DatasetSpec, TreeSpec};
use branchline::tree::{DecisionTree, TreeStats};
use branchline::validate::{validate, ValidationReport};
use branchline_service::{AppConfig, AppState};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "branchline", version, about = "Decision-tree conversation agent toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store directory; overrides the configured one.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize, validate and store a tree source as a new version.
    Ingest(SourceArgs),
    /// Structural checks only; exit 0 iff the tree is valid.
    Validate(SourceArgs),
    /// Converse with a tree line by line on stdin.
    Chat(chat::ChatArgs),
    /// Print a session's hop trace.
    Trace(chat::TraceArgs),
    /// Replay an annotated dataset and report metrics.
    Eval(eval::EvalArgs),
    /// Aggregate per-model rows from a cells CSV.
    Aggregate(eval::AggregateArgs),
    /// Run the HTTP service.
    Serve {
        /// Listen address; overrides the configured one.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Generate synthetic trees, datasets and oracle scripts.
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// json or csv; inferred from the file extension when omitted.
    #[arg(long)]
    format: Option<SourceFormat>,
    #[arg(long)]
    tree_id: Option<String>,
    #[arg(long)]
    entry: Option<String>,
    path: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Synth {
    Tree {
        #[arg(long, default_value_t = 449)]
        nodes: usize,
        /// Defaults to the reference edge density.
        #[arg(long)]
        edges: Option<usize>,
        #[arg(long, default_value_t = 19)]
        depth: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        tree_id: String,
        #[arg(long, default_value = "json")]
        format: SourceFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Dataset {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value_t = 20)]
        conversations: usize,
        #[arg(long, default_value_t = 174)]
        turns: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replies a perfectly informed model would give over a dataset.
    Script {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required = true)]
        strategy: Vec<Strategy>,
        #[arg(long, default_value_t = 5)]
        runs: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(store) = &cli.store {
        config.store = Some(store.clone());
    }
    match cli.command {
        Command::Ingest(args) => cmd_ingest(&config, args),
        Command::Validate(args) => cmd_validate(args),
        Command::Chat(args) => runtime()?.block_on(chat::run(&config, args)),
        Command::Trace(args) => runtime()?.block_on(chat::trace(&config, args)),
        Command::Eval(args) => runtime()?.block_on(eval::run(&config, args)),
        Command::Aggregate(args) => eval::aggregate(args),
        Command::Serve { listen } => {
            if let Some(listen) = listen {
                config.listen = listen;
            }
            runtime()?.block_on(cmd_serve(config))
        }
        Command::Synth(s) => cmd_synth(s),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

pub(crate) fn source_format(path: &Path, format: Option<SourceFormat>) -> SourceFormat {
    format.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => SourceFormat::TabularCsv,
        _ => SourceFormat::CanonicalJson,
    })
}

fn read_source(path: &Path, format: Option<SourceFormat>) -> Result<SourceDocument> {
    let payload = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("source");
    Ok(SourceDocument::new(source_format(path, format), name, payload))
}

/// A tree file normalized in memory, without storing it.
pub(crate) fn read_tree(path: &Path) -> Result<DecisionTree> {
    let source = read_source(path, None)?;
    let normalized = NormalizerRegistry::default().normalize(&source, &NormalizeOptions::default())?;
    Ok(normalized.tree)
}

pub(crate) fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(None, &format!("{}\n", serde_json::to_string_pretty(value)?))
}

pub(crate) fn open_store(config: &AppConfig) -> Result<Arc<branchline::store::EdgeStore>> {
    if config.store.is_none() {
        bail!("no store configured; pass --store DIR or set `store` in the config file");
    }
    Ok(Arc::new(config.open_store()?))
}

fn cmd_ingest(config: &AppConfig, args: SourceArgs) -> Result<ExitCode> {
    let store = open_store(config)?;
    let source = read_source(&args.path, args.format)?;
    let opts = NormalizeOptions {
        tree_id: args.tree_id,
        entry: args.entry,
    };
    let report = ingest(&source, &opts, &NormalizerRegistry::default(), &store)?;
    print_json(&report)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.stored {
        for f in report.validation.findings() {
            eprintln!("{f}");
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ValidateOutput {
    tree_id: String,
    entry: String,
    stats: TreeStats,
    #[serde(flatten)]
    report: ValidationReport,
    findings: Vec<String>,
    warnings: Vec<String>,
}

fn cmd_validate(args: SourceArgs) -> Result<ExitCode> {
    let source = read_source(&args.path, args.format)?;
    let opts = NormalizeOptions {
        tree_id: args.tree_id,
        entry: args.entry,
    };
    let normalized = NormalizerRegistry::default().normalize(&source, &opts)?;
    let tree = normalized.tree;
    let report = validate(&tree);
    let mut warnings = normalized.warnings;
    warnings.extend(lint(&tree));
    let valid = report.is_valid;
    print_json(&ValidateOutput {
        tree_id: tree.tree_id().to_string(),
        entry: tree.entry().to_string(),
        stats: tree.stats(),
        findings: report.findings(),
        report,
        warnings,
    })?;
    Ok(if valid { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

async fn cmd_serve(config: AppConfig) -> Result<ExitCode> {
    let state = AppState::from_config(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .with_context(|| format!("binding {}", config.listen))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    branchline_service::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(cmd: Synth) -> Result<ExitCode> {
    match cmd {
        Synth::Tree {
            nodes,
            edges,
            depth,
            seed,
            tree_id,
            format,
            out,
        } => {
            let base = TreeSpec::with_nodes(nodes);
            let spec = TreeSpec {
                tree_id,
                nodes,
                edges: edges.unwrap_or(base.edges),
                depth,
                seed,
            };
            let tree = generate_tree(&spec)?;
            let text = match format {
                SourceFormat::TabularCsv => to_csv(&tree),
                SourceFormat::CanonicalJson => tree.to_canonical_json() + "\n",
                SourceFormat::Other(f) => bail!("cannot write trees as '{f}'"),
            };
            emit(out.as_deref(), &text)?;
        }
        Synth::Dataset {
            tree,
            conversations,
            turns,
            seed,
            out,
        } => {
            let tree = read_tree(&tree)?;
            let dataset = generate_dataset(
                &tree,
                &DatasetSpec {
                    conversations,
                    turns,
                    seed,
                },
            );
            emit(out.as_deref(), &branchline::eval::dataset_to_jsonl(&dataset))?;
        }
        Synth::Script {
            tree,
            dataset,
            strategy,
            runs,
            out,
        } => {
            let tree = read_tree(&tree)?;
            let dataset = branchline::eval::load_dataset(&dataset, &tree)?;
            let mut steps = Vec::new();
            for s in strategy {
                steps.extend(oracle_script(&tree, &dataset, s, runs));
            }
            emit(out.as_deref(), &script_to_jsonl(&steps))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

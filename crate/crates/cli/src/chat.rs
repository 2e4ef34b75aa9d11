use std::collections::BTreeMap;
use std::io::BufRead;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use branchline::orchestrator::NewSession;
use branchline::session::{HopChoice, HopRecord, Strategy, TurnResult};
use branchline_service::AppConfig;
use clap::Args;
use serde_json::{json, Value};

use crate::remote::Remote;

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Tree to converse with; the only stored tree when omitted.
    #[arg(long)]
    tree_id: Option<String>,
    #[arg(long)]
    version: Option<u64>,
    /// Resume an existing session instead of creating one.
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    start_node: Option<String>,
    /// Member context entry, repeatable. Values parse as JSON when they can.
    #[arg(long = "context", value_name = "KEY=VALUE")]
    context: Vec<String>,
    #[arg(long, default_value = "arbor")]
    strategy: Strategy,
    /// Print every hop under each reply.
    #[arg(long)]
    show_trace: bool,
    /// One TurnResult JSON object per line instead of plain text.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    server: ServerArgs,
}

#[derive(Debug, Args)]
pub struct ServerArgs {
    /// Base URL of a running service; the local store is used when omitted.
    #[arg(long)]
    server: Option<String>,
    /// Environment variable holding the service bearer token.
    #[arg(long, default_value = "BRANCHLINE_TOKEN")]
    token_env: String,
}

impl ServerArgs {
    fn remote(&self) -> Option<Remote> {
        self.server
            .as_deref()
            .map(|base| Remote::new(base, std::env::var(&self.token_env).ok()))
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    session: String,
    #[command(flatten)]
    server: ServerArgs,
}

fn parse_context(pairs: &[String]) -> Result<BTreeMap<String, Value>> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = p.split_once('=').ok_or_else(|| anyhow!("context '{p}' is not KEY=VALUE"))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            Ok((k.to_string(), value))
        })
        .collect()
}

enum Backend {
    Local(branchline::orchestrator::Orchestrator),
    Remote(Remote),
}

impl Backend {
    async fn turn(&self, session: &str, text: &str, strategy: Strategy) -> Result<TurnResult> {
        match self {
            Backend::Local(o) => Ok(o.handle_turn(session, text, strategy).await?),
            Backend::Remote(r) => {
                r.post(&format!("/sessions/{session}/messages"), &json!({"text": text, "strategy": strategy}))
                    .await
            }
        }
    }
}

pub async fn run(config: &AppConfig, args: ChatArgs) -> Result<ExitCode> {
    let external_context = parse_context(&args.context)?;
    let backend = match args.server.remote() {
        Some(r) => Backend::Remote(r),
        None => Backend::Local(config.orchestrator(crate::open_store(config)?)?),
    };
    let session_id = match &args.session {
        Some(id) => id.clone(),
        None => {
            let mut spec = NewSession::new(match &args.tree_id {
                Some(t) => t.clone(),
                None => default_tree(&backend)?,
            });
            spec.version = args.version;
            spec.external_context = external_context;
            spec.start_node = args.start_node.clone();
            match &backend {
                Backend::Local(o) => o.create_session(spec)?.session_id,
                Backend::Remote(r) => {
                    let created: Value = r.post("/sessions", &serde_json::to_value(&spec)?).await?;
                    created["session_id"].as_str().context("service returned no session id")?.to_string()
                }
            }
        }
    };
    eprintln!("session {session_id}");

    let mut failures = 0usize;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "/quit" {
            break;
        }
        match backend.turn(&session_id, text, args.strategy).await {
            Ok(result) => print_turn(&result, args.json, args.show_trace)?,
            Err(e) => {
                failures += 1;
                eprintln!("turn failed, session unchanged: {e:#}");
            }
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn default_tree(backend: &Backend) -> Result<String> {
    let Backend::Local(o) = backend else {
        return Err(anyhow!("--tree-id is required with --server"));
    };
    let ids = o.store().tree_ids();
    match ids.as_slice() {
        [only] => Ok(only.clone()),
        [] => Err(anyhow!("the store holds no trees")),
        _ => Err(anyhow!("several trees stored ({}); pass --tree-id", ids.join(", "))),
    }
}

fn hop_line(i: usize, h: &HopRecord) -> String {
    let choice = match &h.chosen {
        HopChoice::Stay => "stay".to_string(),
        HopChoice::Transition(k) => k.clone(),
    };
    format!("  hop {}: {} -> {} [{}] {}", i + 1, h.from_node, h.to_node, choice, h.scratchpad.replace('\n', " "))
}

fn print_turn(result: &TurnResult, as_json: bool, show_trace: bool) -> Result<()> {
    let mut out = String::new();
    if as_json {
        out.push_str(&serde_json::to_string(result)?);
        out.push('\n');
    } else {
        out.push_str(&format!("agent [{}]> {}\n", result.final_node, result.message));
        if let Some(bad) = &result.navigation_error {
            out.push_str(&format!("  navigation error: undefined node '{bad}'\n"));
        }
        if show_trace {
            for (i, h) in result.hops.iter().enumerate() {
                out.push_str(&hop_line(i, h));
                out.push('\n');
            }
        }
    }
    crate::emit(None, &out)
}

pub async fn trace(config: &AppConfig, args: TraceArgs) -> Result<ExitCode> {
    let view: Value = match args.server.remote() {
        Some(r) => r.get(&format!("/sessions/{}/trace", args.session)).await?,
        None => {
            let s = crate::open_store(config)?.load_session(&args.session)?;
            json!({
                "session_id": s.session_id,
                "current_node": s.current_node,
                "turns": s.turn_counter,
                "hops": s.trace,
            })
        }
    };
    crate::emit(None, &format!("{}\n", serde_json::to_string_pretty(&view)?))?;
    Ok(ExitCode::SUCCESS)
}

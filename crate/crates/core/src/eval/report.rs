//! Deterministic report rendering.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{CellSummary, MetricsSummary};
use crate::session::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    MarkdownTable,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" | "markdown-table" => Ok(ReportFormat::MarkdownTable),
            other => Err(format!("unknown report format '{other}' (json, csv, markdown)")),
        }
    }
}

const CSV_HEADER: [&str; 11] = [
    "model_id",
    "strategy",
    "runs",
    "turns",
    "accuracy_mean",
    "accuracy_sd",
    "latency_mean_s",
    "latency_median_s",
    "cost_mean_usd",
    "failed_turns",
    "navigation_errors",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn money(v: Option<f64>) -> String {
    v.map(|x| format!("${x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn render_report(summary: &MetricsSummary, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory write");
            for c in &summary.cells {
                w.write_record([
                    c.model_id.clone(),
                    c.strategy.to_string(),
                    c.runs.to_string(),
                    c.turns.to_string(),
                    c.accuracy_mean.to_string(),
                    c.accuracy_sd.to_string(),
                    c.latency_mean_s.to_string(),
                    c.latency_median_s.to_string(),
                    opt(c.cost_mean_usd),
                    c.failed_turns.to_string(),
                    c.navigation_errors.to_string(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        }
        ReportFormat::MarkdownTable => markdown(summary),
    }
}

fn markdown(summary: &MetricsSummary) -> String {
    let mut out = String::new();
    out.push_str("## Turn accuracy\n\n| Model | Strategy | Turn Accuracy | Turn Accuracy STD |\n|---|---|---|---|\n");
    for c in &summary.cells {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2}% | {:.1}% |",
            c.model_id,
            c.strategy.display_name(),
            c.accuracy_mean,
            c.accuracy_sd
        );
    }
    out.push_str("\n## Latency\n\n| Model | Strategy | Latency per Turn (Mean) (s) | Latency per Turn (Median) (s) |\n|---|---|---|---|\n");
    for c in &summary.cells {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} |",
            c.model_id,
            c.strategy.display_name(),
            c.latency_mean_s,
            c.latency_median_s
        );
    }
    out.push_str("\n## Cost\n\n| Model | Strategy | Cost per Turn (USD) |\n|---|---|---|\n");
    for c in &summary.cells {
        let _ = writeln!(out, "| {} | {} | {} |", c.model_id, c.strategy.display_name(), money(c.cost_mean_usd));
    }
    if !summary.aggregates.is_empty() {
        let arbor = summary.aggregates.iter().find(|r| r.strategy == Strategy::Arbor);
        let base = summary.aggregates.iter().find(|r| r.strategy == Strategy::Baseline);
        let cell = |r: Option<&super::AggregateRow>, f: &dyn Fn(&super::AggregateRow) -> String| {
            r.map(f).unwrap_or_else(|| "n/a".into())
        };
        let d = summary.deltas;
        out.push_str("\n## Aggregate\n\n| Metric | Arbor (Mean ± SD) | Single-prompt (Mean ± SD) | Performance Delta |\n|---|---|---|---|\n");
        let _ = writeln!(
            out,
            "| Turn Accuracy | {} | {} | {} |",
            cell(arbor, &|r| format!("{:.2}% (± {:.2}%)", r.accuracy_mean, r.accuracy_sd)),
            cell(base, &|r| format!("{:.2}% (± {:.2}%)", r.accuracy_mean, r.accuracy_sd)),
            d.map(|d| format!("{:+.2} points", d.accuracy_points)).unwrap_or_else(|| "n/a".into())
        );
        let cost = |r: &super::AggregateRow| match (r.cost_mean_usd, r.cost_sd_usd) {
            (Some(m), Some(s)) => format!("${m:.3} (± ${s:.3})"),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            out,
            "| Cost per Turn | {} | {} | {} |",
            cell(arbor, &cost),
            cell(base, &cost),
            d.and_then(|d| d.cost_ratio)
                .map(|x| format!("{x:.1}x Cheaper"))
                .unwrap_or_else(|| "n/a".into())
        );
        let _ = writeln!(
            out,
            "| Latency per Turn | {} | {} | {} |",
            cell(arbor, &|r| format!("{:.2}s (± {:.2}s)", r.latency_mean_s, r.latency_sd_s)),
            cell(base, &|r| format!("{:.2}s (± {:.2}s)", r.latency_mean_s, r.latency_sd_s)),
            d.map(|d| format!("{:.1}% Faster", d.latency_reduction_pct))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    out
}

/// Reads the per-cell rows written by the CSV format.
pub fn parse_cells_csv(text: &str) -> Result<Vec<CellSummary>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let f = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| f(i).parse::<f64>().map_err(|e| format!("{}: {e}", CSV_HEADER[i]));
        let int = |i: usize| f(i).parse::<usize>().map_err(|e| format!("{}: {e}", CSV_HEADER[i]));
        out.push(CellSummary {
            model_id: f(0).to_string(),
            strategy: f(1).parse()?,
            runs: int(2)?,
            turns: int(3)?,
            accuracy_mean: num(4)?,
            accuracy_sd: num(5)?,
            latency_mean_s: num(6)?,
            latency_median_s: num(7)?,
            cost_mean_usd: if f(8).is_empty() { None } else { Some(num(8)?) },
            failed_turns: int(9)?,
            navigation_errors: int(10)?,
        });
    }
    Ok(out)
}

pub fn emit_report(summary: &MetricsSummary, format: ReportFormat, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, render_report(summary, format))
}

//! Turn accuracy, cost, latency and cross-model aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::gateway::Usage;
use crate::session::Strategy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no records")]
    NoRecords,
    #[error("incomplete run coverage: {0}")]
    IncompleteRuns(String),
    #[error("no rate for model '{0}'")]
    MissingRate(String),
    #[error("empty quality distribution")]
    EmptyDistribution,
    #[error("rate table: {0}")]
    RateTable(String),
}

/// USD per token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub input_usd_per_token: f64,
    pub output_usd_per_token: f64,
}

impl Rate {
    pub fn per_million(input: f64, output: f64) -> Self {
        Self {
            input_usd_per_token: input / 1e6,
            output_usd_per_token: output / 1e6,
        }
    }
}

/// Rate file entry, priced per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RateFileEntry {
    input_usd_per_1m: f64,
    output_usd_per_1m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rates: BTreeMap<String, Rate>,
}

impl RateTable {
    /// Built-in list prices per model id.
    pub fn reference() -> Self {
        let gpt5 = Rate::per_million(1.25, 10.0);
        let entries = [
            ("GPT-5", gpt5),
            ("GPT-5-minimal", gpt5),
            ("GPT-5-medium", gpt5),
            ("GPT-5-high", gpt5),
            ("GPT-4.1", Rate::per_million(2.0, 8.0)),
            ("Claude Sonnet 4.5", Rate::per_million(3.0, 15.0)),
            ("Gemini 3 Pro", Rate::per_million(2.0, 12.0)),
            ("Gemini 3 Flash", Rate::per_million(0.5, 3.0)),
            ("DeepSeek V3.1", Rate::per_million(0.6, 1.7)),
            ("Qwen-3 235B Instruct", Rate::per_million(0.15, 0.8)),
            ("Qwen-3 30B Instruct", Rate::per_million(0.1, 0.3)),
        ];
        Self {
            rates: entries.into_iter().map(|(k, r)| (k.to_string(), r)).collect(),
        }
    }

    /// Parses `{"model": {"input_usd_per_1m": x, "output_usd_per_1m": y}}`.
    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let file: BTreeMap<String, RateFileEntry> =
            serde_json::from_str(text).map_err(|e| MetricsError::RateTable(e.to_string()))?;
        let mut rates = BTreeMap::new();
        for (model, e) in file {
            if !(e.input_usd_per_1m >= 0.0 && e.output_usd_per_1m >= 0.0) {
                return Err(MetricsError::RateTable(format!("negative rate for '{model}'")));
            }
            rates.insert(model, Rate::per_million(e.input_usd_per_1m, e.output_usd_per_1m));
        }
        Ok(Self { rates })
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricsError::RateTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file: BTreeMap<&String, RateFileEntry> = self
            .rates
            .iter()
            .map(|(k, r)| {
                (
                    k,
                    RateFileEntry {
                        input_usd_per_1m: r.input_usd_per_token * 1e6,
                        output_usd_per_1m: r.output_usd_per_token * 1e6,
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&file).expect("rates serialize")
    }

    pub fn get(&self, model_id: &str) -> Result<Rate, MetricsError> {
        self.rates
            .get(model_id)
            .copied()
            .ok_or_else(|| MetricsError::MissingRate(model_id.to_string()))
    }

    pub fn cost(&self, model_id: &str, usage: Usage) -> Result<f64, MetricsError> {
        Ok(cost_per_turn(usage, self.get(model_id)?))
    }
}

pub fn cost_per_turn(usage: Usage, rate: Rate) -> f64 {
    usage.input_tokens as f64 * rate.input_usd_per_token + usage.output_tokens as f64 * rate.output_usd_per_token
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-run accuracy in percent, by run index. Every run must cover the same
/// turns exactly once.
pub fn run_accuracies(records: &[EvalRecord]) -> Result<BTreeMap<u32, f64>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let mut runs: BTreeMap<u32, (BTreeSet<&str>, usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = runs.entry(r.run_index).or_default();
        if !entry.0.insert(r.turn_id.as_str()) {
            return Err(MetricsError::IncompleteRuns(format!(
                "turn '{}' appears twice in run {}",
                r.turn_id, r.run_index
            )));
        }
        entry.1 += 1;
        entry.2 += usize::from(r.correct);
    }
    let first = &runs.values().next().expect("non-empty").0;
    for (idx, (turns, _, _)) in &runs {
        if turns != first {
            return Err(MetricsError::IncompleteRuns(format!(
                "run {idx} covers {} turns, run {} covers {}",
                turns.len(),
                runs.keys().next().expect("non-empty"),
                first.len()
            )));
        }
    }
    Ok(runs
        .into_iter()
        .map(|(idx, (_, n, ok))| (idx, 100.0 * ok as f64 / n as f64))
        .collect())
}

/// Mean and sample SD of per-run accuracy, in percent.
pub fn turn_accuracy(records: &[EvalRecord]) -> Result<(f64, f64), MetricsError> {
    let acc: Vec<f64> = run_accuracies(records)?.into_values().collect();
    Ok((mean(&acc), sample_sd(&acc)))
}

/// One (model, strategy) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model_id: String,
    pub strategy: Strategy,
    pub runs: usize,
    pub turns: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub latency_mean_s: f64,
    pub latency_median_s: f64,
    /// Absent when any record lacks a cost.
    pub cost_mean_usd: Option<f64>,
    pub failed_turns: usize,
    pub navigation_errors: usize,
}

impl CellSummary {
    /// A row from already-aggregated values.
    pub fn from_values(
        model_id: impl Into<String>,
        strategy: Strategy,
        accuracy_mean: f64,
        latency_mean_s: f64,
        cost_mean_usd: f64,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            strategy,
            runs: 0,
            turns: 0,
            accuracy_mean,
            accuracy_sd: 0.0,
            latency_mean_s,
            latency_median_s: latency_mean_s,
            cost_mean_usd: Some(cost_mean_usd),
            failed_turns: 0,
            navigation_errors: 0,
        }
    }
}

/// Summarizes the records of one (model, strategy) cell.
pub fn summarize(records: &[EvalRecord]) -> Result<CellSummary, MetricsError> {
    let first = records.first().ok_or(MetricsError::NoRecords)?;
    if records
        .iter()
        .any(|r| r.model_id != first.model_id || r.strategy != first.strategy)
    {
        return Err(MetricsError::IncompleteRuns("records mix models or strategies".into()));
    }
    let runs = run_accuracies(records)?;
    let acc: Vec<f64> = runs.values().copied().collect();
    let latencies: Vec<f64> = records.iter().map(|r| r.latency_ms as f64 / 1000.0).collect();
    let costs: Option<Vec<f64>> = records.iter().map(|r| r.cost_usd).collect();
    Ok(CellSummary {
        model_id: first.model_id.clone(),
        strategy: first.strategy,
        runs: runs.len(),
        turns: records.len() / runs.len(),
        accuracy_mean: mean(&acc),
        accuracy_sd: sample_sd(&acc),
        latency_mean_s: mean(&latencies),
        latency_median_s: median(&latencies),
        cost_mean_usd: costs.map(|c| mean(&c)),
        failed_turns: records.iter().filter(|r| r.error.is_some()).count(),
        navigation_errors: records.iter().filter(|r| r.navigation_error).count(),
    })
}

/// Unweighted mean and sample SD across model rows of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub models: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub latency_mean_s: f64,
    pub latency_sd_s: f64,
    pub cost_mean_usd: Option<f64>,
    pub cost_sd_usd: Option<f64>,
}

/// Arbor against the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// Arbor minus baseline, percentage points.
    pub accuracy_points: f64,
    /// Baseline cost over Arbor cost.
    pub cost_ratio: Option<f64>,
    /// Baseline latency saved, percent of baseline.
    pub latency_reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cells: Vec<CellSummary>,
    pub aggregates: Vec<AggregateRow>,
    pub deltas: Option<Deltas>,
}

impl MetricsSummary {
    pub fn from_cells(mut cells: Vec<CellSummary>) -> Self {
        cells.sort_by(|a, b| (&a.model_id, a.strategy).cmp(&(&b.model_id, b.strategy)));
        let (aggregates, deltas) = aggregate_summary(&cells);
        Self {
            cells,
            aggregates,
            deltas,
        }
    }
}

pub fn aggregate_summary(cells: &[CellSummary]) -> (Vec<AggregateRow>, Option<Deltas>) {
    let mut by_strategy: BTreeMap<Strategy, Vec<&CellSummary>> = BTreeMap::new();
    for c in cells {
        by_strategy.entry(c.strategy).or_default().push(c);
    }
    let rows: Vec<AggregateRow> = by_strategy
        .into_iter()
        .map(|(strategy, rows)| {
            let acc: Vec<f64> = rows.iter().map(|c| c.accuracy_mean).collect();
            let lat: Vec<f64> = rows.iter().map(|c| c.latency_mean_s).collect();
            let cost: Option<Vec<f64>> = rows.iter().map(|c| c.cost_mean_usd).collect();
            AggregateRow {
                strategy,
                models: rows.len(),
                accuracy_mean: mean(&acc),
                accuracy_sd: sample_sd(&acc),
                latency_mean_s: mean(&lat),
                latency_sd_s: sample_sd(&lat),
                cost_mean_usd: cost.as_deref().map(mean),
                cost_sd_usd: cost.as_deref().map(sample_sd),
            }
        })
        .collect();
    let find = |s: Strategy| rows.iter().find(|r| r.strategy == s);
    let deltas = match (find(Strategy::Arbor), find(Strategy::Baseline)) {
        (Some(a), Some(b)) => Some(Deltas {
            accuracy_points: a.accuracy_mean - b.accuracy_mean,
            cost_ratio: match (a.cost_mean_usd, b.cost_mean_usd) {
                (Some(ac), Some(bc)) if ac > 0.0 => Some(bc / ac),
                _ => None,
            },
            latency_reduction_pct: if b.latency_mean_s > 0.0 {
                100.0 * (b.latency_mean_s - a.latency_mean_s) / b.latency_mean_s
            } else {
                0.0
            },
        }),
        _ => None,
    };
    (rows, deltas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn records(per_run_correct: &[usize], turns: usize) -> Vec<EvalRecord> {
        let mut out = Vec::new();
        for (run, &ok) in per_run_correct.iter().enumerate() {
            for t in 0..turns {
                out.push(EvalRecord {
                    turn_id: format!("t{t}"),
                    run_index: run as u32 + 1,
                    strategy: Strategy::Arbor,
                    model_id: "m".into(),
                    target_node: "X".into(),
                    reached_node: Some("X".into()),
                    correct: t < ok,
                    navigation_error: false,
                    latency_ms: 1000,
                    input_tokens: 0,
                    output_tokens: 0,
                    cost_usd: Some(0.0),
                    error: None,
                });
            }
        }
        out
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(turn_accuracy(&records(&[10, 10, 10], 10)).unwrap(), (100.0, 0.0));
        assert_eq!(turn_accuracy(&records(&[9; 5], 10)).unwrap(), (90.0, 0.0));
        let (m, s) = turn_accuracy(&records(&[92, 90, 94, 91, 93], 100)).unwrap();
        // Hand computation: deviations 0,-2,2,-1,1 give Σd² = 10, 10/4 = 2.5.
        assert!((m - 92.0).abs() < 1e-9);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn incomplete_runs_are_rejected() {
        let mut r = records(&[3, 3], 4);
        r.pop();
        assert!(matches!(turn_accuracy(&r), Err(MetricsError::IncompleteRuns(_))));
        assert!(matches!(turn_accuracy(&[]), Err(MetricsError::NoRecords)));
    }

    #[test]
    fn cost_examples() {
        let rates = RateTable::reference();
        assert!((rates.cost("GPT-5", Usage::new(1_000_000, 0)).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(rates.cost("GPT-5", Usage::new(0, 0)).unwrap(), 0.0);
        // 1000 × 1.25e-6 + 100 × 10e-6
        assert!((rates.cost("GPT-5", Usage::new(1000, 100)).unwrap() - 0.00225).abs() < 1e-15);
        assert!(matches!(rates.cost("nope", Usage::default()), Err(MetricsError::MissingRate(_))));
        let back = RateTable::from_json(&rates.to_json()).unwrap();
        for (k, r) in &rates.rates {
            let b = back.rates[k];
            assert!((b.input_usd_per_token - r.input_usd_per_token).abs() < 1e-18);
        }
    }

    #[test]
    fn deltas() {
        let cells = vec![
            CellSummary::from_values("a", Strategy::Arbor, 90.0, 10.0, 0.01),
            CellSummary::from_values("a", Strategy::Baseline, 60.0, 20.0, 0.1),
        ];
        let (rows, d) = aggregate_summary(&cells);
        assert_eq!(rows.len(), 2);
        let d = d.unwrap();
        assert!((d.accuracy_points - 30.0).abs() < 1e-12);
        assert!((d.cost_ratio.unwrap() - 10.0).abs() < 1e-9);
        assert!((d.latency_reduction_pct - 50.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cost_is_linear_and_monotone(a in 0u64..10_000_000, b in 0u64..10_000_000, c in 0u64..1000, d in 0u64..1000) {
            let r = Rate::per_million(1.25, 10.0);
            let sum = cost_per_turn(Usage::new(a, c), r) + cost_per_turn(Usage::new(b, d), r);
            let joint = cost_per_turn(Usage::new(a + b, c + d), r);
            prop_assert!((sum - joint).abs() <= 1e-9 * joint.max(1.0));
            prop_assert!(cost_per_turn(Usage::new(a + 1, c), r) > cost_per_turn(Usage::new(a, c), r));
            prop_assert!(cost_per_turn(Usage::new(a, c + 1), r) > cost_per_turn(Usage::new(a, c), r));
        }
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::curriculum::StrategyKind;
use crate::evaluation::{self, AggregateReport, Metric, MetricReport, Prediction};

use super::run::Experiment;
use super::{PredictionRecord, RunError};

/// A (strategy, seed) run that is missing predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIncomplete {
    pub strategy: String,
    pub seed: u64,
    pub missing: usize,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub task_id: String,
    pub task_kind: TaskKind,
    #[serde(default)]
    pub baseline: Option<String>,
    pub reports: Vec<MetricReport<f64>>,
    pub aggregates: Vec<AggregateReport<f64>>,
    /// Relative change of each strategy's mean against the baseline's.
    #[serde(default)]
    pub deltas: BTreeMap<String, BTreeMap<Metric, f64>>,
    #[serde(default)]
    pub incomplete: Vec<RunIncomplete>,
    /// Strategies whose order does not depend on the seed.
    #[serde(default)]
    pub seed_free: Vec<String>,
}

pub(crate) fn build_metrics(
    exp: &Experiment,
    predictions: &BTreeMap<(String, u64, String), PredictionRecord>,
) -> Result<MetricsFile, RunError> {
    let golds = exp.golds();
    let mut reports = Vec::new();
    let mut aggregates = Vec::new();
    let mut incomplete = Vec::new();
    for s in &exp.cfg.strategies {
        let mut mine = Vec::new();
        for &seed in &exp.cfg.seeds {
            let preds: Vec<Prediction> = exp
                .tests
                .iter()
                .filter_map(|t| predictions.get(&(s.label().to_string(), seed, t.demo_id.clone())))
                .map(|p| Prediction {
                    test_id: p.test_id.clone(),
                    raw_text: p.raw_text.clone(),
                    parsed: p.parsed.clone(),
                })
                .collect();
            if preds.len() < golds.len() {
                incomplete.push(RunIncomplete {
                    strategy: s.label().to_string(),
                    seed,
                    missing: golds.len() - preds.len(),
                });
                continue;
            }
            let mut r = evaluation::score_run::<f64>(&preds, &golds, &exp.spec)?;
            r.strategy = Some(s.label().to_string());
            r.seed = Some(seed);
            mine.push(r);
        }
        if mine.len() == exp.cfg.seeds.len() {
            aggregates.push(evaluation::aggregate_seeds(&mine)?);
        }
        reports.extend(mine);
    }

    let baseline = exp.cfg.baseline_label();
    let deltas = match baseline.as_deref().and_then(|b| find(&aggregates, b)) {
        Some(base) => deltas_against(&aggregates, base),
        None => BTreeMap::new(),
    };
    let seed_free = exp
        .cfg
        .strategies
        .iter()
        .filter(|s| s.kind != StrategyKind::Random)
        .map(|s| s.label().to_string())
        .collect();
    Ok(MetricsFile {
        task_id: exp.spec.task_id.clone(),
        task_kind: exp.spec.kind,
        baseline,
        reports,
        aggregates,
        deltas,
        incomplete,
        seed_free,
    })
}

fn find<'a>(aggs: &'a [AggregateReport<f64>], strategy: &str) -> Option<&'a AggregateReport<f64>> {
    aggs.iter().find(|a| a.strategy.as_deref() == Some(strategy))
}

/// Metrics with a zero baseline mean have no relative change and are left out.
fn deltas_against(
    aggs: &[AggregateReport<f64>],
    base: &AggregateReport<f64>,
) -> BTreeMap<String, BTreeMap<Metric, f64>> {
    let mut out = BTreeMap::new();
    for a in aggs.iter().filter(|a| a.strategy != base.strategy) {
        let mut d = BTreeMap::new();
        for (m, v) in &a.metrics {
            match base.metrics.get(m) {
                Some(b) if b.mean != 0.0 => {
                    d.insert(*m, (v.mean - b.mean) / b.mean);
                }
                _ => {}
            }
        }
        out.insert(a.strategy.clone().unwrap_or_default(), d);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
}

fn columns(kind: TaskKind) -> &'static [Metric] {
    match kind {
        TaskKind::SingleTextClassification => &[Metric::MacroPrecision, Metric::MacroF1],
        TaskKind::SentencePairInference => &[Metric::Accuracy, Metric::MacroF1],
        TaskKind::EntityExtraction => &[Metric::MicroF1],
    }
}

fn primary(kind: TaskKind) -> Metric {
    if kind.is_classification() {
        Metric::MacroF1
    } else {
        Metric::MicroF1
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn signed_pct(v: f64) -> String {
    format!("{:+.2}%", v * 100.0)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn text(&self) -> String {
        let n = self.header.len();
        let mut width = vec![0; n];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |row: &[String], out: &mut String| {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = width[i])
                    } else {
                        format!("{c:>w$}", w = width[i])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        };
        line(&self.header, &mut out);
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule, &mut out);
        for r in &self.rows {
            line(r, &mut out);
        }
        out
    }

    fn csv(&self) -> String {
        let esc = |c: &String| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            out.push_str(&row.iter().map(esc).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// One row per strategy, one column group per task, then the average
/// primary F1 across tasks. Cells are `mean±std` in percent. A second
/// table gives each strategy's relative change against `baseline`.
///
/// Strategies and tasks keep their first-seen order across `files`.
pub fn render_table(files: &[MetricsFile], baseline: Option<&str>, format: ReportFormat) -> String {
    let mut tasks: Vec<(&str, TaskKind)> = Vec::new();
    let mut strategies: Vec<&str> = Vec::new();
    let mut cell: BTreeMap<(&str, &str), &AggregateReport<f64>> = BTreeMap::new();
    for f in files {
        if !tasks.iter().any(|(t, _)| *t == f.task_id) {
            tasks.push((&f.task_id, f.task_kind));
        }
        for a in &f.aggregates {
            let s = a.strategy.as_deref().unwrap_or("-");
            if !strategies.contains(&s) {
                strategies.push(s);
            }
            cell.entry((s, f.task_id.as_str())).or_insert(a);
        }
    }
    let avg_f1 = |s: &str| -> Option<f64> {
        let v: Option<Vec<f64>> = tasks
            .iter()
            .map(|(t, k)| cell.get(&(s, *t)).and_then(|a| a.metrics.get(&primary(*k))).map(|m| m.mean))
            .collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let csv = format == ReportFormat::Csv;

    let mut header = vec!["Strategy".to_string()];
    for (t, k) in &tasks {
        for m in columns(*k) {
            if csv {
                header.push(format!("{t} {} mean", m.title()));
                header.push(format!("{t} {} std", m.title()));
            } else {
                header.push(format!("{t} {}", m.title()));
            }
        }
    }
    header.push("Avg F1".into());
    let mut rows = Vec::new();
    for s in &strategies {
        let mut row = vec![s.to_string()];
        for (t, k) in &tasks {
            for m in columns(*k) {
                let v = cell.get(&(*s, *t)).and_then(|a| a.metrics.get(m));
                match (v, csv) {
                    (Some(v), true) => row.extend([pct(v.mean), pct(v.std)]),
                    (Some(v), false) => row.push(format!("{}±{}", pct(v.mean), pct(v.std))),
                    (None, true) => row.extend(["".into(), "".into()]),
                    (None, false) => row.push("-".into()),
                }
            }
        }
        row.push(avg_f1(s).map(pct).unwrap_or_else(|| if csv { String::new() } else { "-".into() }));
        rows.push(row);
    }
    let main = Table { header, rows };

    let base = baseline.filter(|b| strategies.contains(b));
    let delta = base.map(|b| {
        let mut header = vec![format!("Change vs {b}")];
        header.extend(tasks.iter().map(|(t, k)| format!("{t} {}", primary(*k).title())));
        header.push("Avg F1".into());
        let rows = strategies
            .iter()
            .filter(|s| **s != b)
            .map(|s| {
                let mut row = vec![s.to_string()];
                for (t, k) in &tasks {
                    let m = primary(*k);
                    let c = cell.get(&(*s, *t)).and_then(|a| a.metrics.get(&m));
                    let r = cell.get(&(b, *t)).and_then(|a| a.metrics.get(&m));
                    row.push(match (c, r) {
                        (Some(c), Some(r)) if r.mean != 0.0 => signed_pct((c.mean - r.mean) / r.mean),
                        _ => "-".into(),
                    });
                }
                row.push(match (avg_f1(s), avg_f1(b)) {
                    (Some(c), Some(r)) if r != 0.0 => signed_pct((c - r) / r),
                    _ => "-".into(),
                });
                row
            })
            .collect();
        Table { header, rows }
    });

    match (format, delta) {
        (ReportFormat::Csv, None) => main.csv(),
        (ReportFormat::Csv, Some(d)) => format!("{}\n{}", main.csv(), d.csv()),
        (ReportFormat::Text, None) => main.text(),
        (ReportFormat::Text, Some(d)) => format!("{}\n{}", main.text(), d.text()),
    }
}

/// Contents of `report.txt` for one run.
pub(crate) fn run_report(m: &MetricsFile, exp: &Experiment) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "task {} ({}), {} test inputs, seeds {:?}, template {}",
        m.task_id,
        m.task_kind.as_str(),
        exp.tests.len(),
        exp.cfg.seeds,
        exp.cfg.template.kind.as_str()
    );
    out.push('\n');
    out.push_str(&render_table(std::slice::from_ref(m), m.baseline.as_deref(), ReportFormat::Text));
    if !m.reports.is_empty() {
        out.push_str("\nper seed:\n");
        for r in &m.reports {
            let _ = writeln!(
                out,
                "  {} seed {}: F1 {}",
                r.strategy.as_deref().unwrap_or("-"),
                r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                r.primary_f1().map(pct).unwrap_or_else(|| "-".into())
            );
        }
    }
    if exp.cfg.seeds.len() > 1 && !m.seed_free.is_empty() {
        let _ = writeln!(
            out,
            "\nnote: {} ignore the seed; with deterministic decoding their runs repeat across seeds.",
            m.seed_free.join(", ")
        );
    }
    for i in &m.incomplete {
        let _ = writeln!(
            out,
            "incomplete: {} seed {} lacks {} predictions",
            i.strategy, i.seed, i.missing
        );
    }
    out
}

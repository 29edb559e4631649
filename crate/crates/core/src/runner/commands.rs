//! File-in, file-out wrappers: one module operation per input record.
//!
//! Record-level failures are collected with a locator (`line N` plus the
//! record's id) and the command carries on; with `strict` the first one is
//! returned as an error instead.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{self, TaskSpec};
use crate::curriculum::{self, OrderingStrategy};
use crate::difficulty::{self, AggregateRanking, DifficultyScore};
use crate::evaluation::{self, Prediction};
use crate::gateway::Gateway;
use crate::jsonl;
use crate::promptkit::TemplateFamily;

use super::report::{render_table, MetricsFile, ReportFormat};
use super::run::{evaluate_fixed_order, Experiment};
use super::{RunError, METRICS_FILE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub locator: String,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.locator, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandSummary {
    pub written: usize,
    pub errors: Vec<RecordError>,
}

impl CommandSummary {
    fn fail(&mut self, strict: bool, locator: String, message: impl fmt::Display) -> Result<(), RunError> {
        let e = RecordError {
            locator,
            message: message.to_string(),
        };
        if strict {
            return Err(RunError::Record(e));
        }
        self.errors.push(e);
        Ok(())
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, rec: &T) -> Result<(), RunError> {
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(out, "{line}").map_err(|e| RunError::io(Path::new("<output>"), e))
}

/// Line number and parse result of each nonblank line.
type Lines<T> = Vec<(usize, Result<T, String>)>;

/// Lines of a JSONL file, each parsed on its own so one bad line does not
/// hide the rest.
fn records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Lines<T>, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(|e| e.to_string())))
        .collect())
}

/// Scores every demonstration in `pool`, writing one DifficultyScore line
/// per demonstration in file order.
pub fn cmd_score(
    spec: &TaskSpec,
    pool: &Path,
    family: &TemplateFamily,
    gateway: &Gateway,
    normalize: bool,
    strict: bool,
    out: &mut dyn Write,
) -> Result<CommandSummary, RunError> {
    let demos = corpus::load_pool(pool, spec)?;
    let refs: Vec<_> = demos.iter().collect();
    let mut scores = difficulty::complexity_many::<f64>(&refs, spec, family, gateway, normalize);
    let mut summary = CommandSummary::default();
    for (i, d) in demos.iter().enumerate() {
        match scores.remove(&d.demo_id).expect("every demo scored") {
            Ok(s) => {
                emit(out, &s)?;
                summary.written += 1;
            }
            Err(e) => summary.fail(strict, format!("record {} ({})", i + 1, d.demo_id), e)?,
        }
    }
    Ok(summary)
}

/// One line of an order or search request file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderRequest {
    pub test_id: String,
    pub candidates: Vec<String>,
    /// Per-request scores; fall back to the shared score file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

/// Reads a `cmd_score` output file into a complexity map.
pub fn load_scores(path: &Path) -> Result<BTreeMap<String, f64>, RunError> {
    let recs: Vec<(usize, DifficultyScore<f64>)> = jsonl::read_records(path).map_err(|e| RunError::io(path, e))?;
    Ok(recs.into_iter().map(|(_, s)| (s.demo_id, s.complexity)).collect())
}

/// Orders each request's candidates, writing one OrderPlan per line.
pub fn cmd_order(
    requests: &Path,
    strategy: &OrderingStrategy,
    shared_scores: Option<&BTreeMap<String, f64>>,
    strict: bool,
    out: &mut dyn Write,
) -> Result<CommandSummary, RunError> {
    strategy.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let mut summary = CommandSummary::default();
    for (line, rec) in records::<OrderRequest>(requests)? {
        let req = match rec {
            Ok(r) => r,
            Err(e) => {
                summary.fail(strict, format!("line {line}"), e)?;
                continue;
            }
        };
        let scores = req.scores.as_ref().or(shared_scores);
        match curriculum::order_demonstrations(&req.test_id, &req.candidates, strategy, scores) {
            Ok(plan) => {
                emit(out, &plan)?;
                summary.written += 1;
            }
            Err(e) => summary.fail(strict, format!("line {line} ({})", req.test_id), e)?,
        }
    }
    Ok(summary)
}

#[derive(Deserialize)]
struct EvalLine {
    test_id: String,
    raw_text: String,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Scores predictions against the gold labels of `gold`, one MetricReport
/// line per (strategy, seed) group. Labels are re-parsed from `raw_text`.
pub fn cmd_eval(
    spec: &TaskSpec,
    gold: &Path,
    predictions: &Path,
    strict: bool,
    out: &mut dyn Write,
) -> Result<CommandSummary, RunError> {
    let golds = corpus::load_pool(gold, spec)?
        .into_iter()
        .map(|d| (d.demo_id, d.gold))
        .collect::<BTreeMap<_, _>>();
    let mut summary = CommandSummary::default();
    let mut groups: BTreeMap<(Option<String>, Option<u64>), Vec<Prediction>> = BTreeMap::new();
    for (line, rec) in records::<EvalLine>(predictions)? {
        match rec {
            Ok(r) => groups
                .entry((r.strategy, r.seed))
                .or_default()
                .push(Prediction::new(r.test_id, r.raw_text, spec)),
            Err(e) => summary.fail(strict, format!("line {line}"), e)?,
        }
    }
    for ((strategy, seed), preds) in groups {
        match evaluation::score_run::<f64>(&preds, &golds, spec) {
            Ok(mut r) => {
                r.strategy = strategy;
                r.seed = seed;
                emit(out, &r)?;
                summary.written += 1;
            }
            Err(e) => {
                let loc = format!(
                    "strategy {} seed {}",
                    strategy.as_deref().unwrap_or("-"),
                    seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
                );
                summary.fail(strict, loc, e)?
            }
        }
    }
    Ok(summary)
}

/// Aggregates expert rankings and prints `W=...` followed by the items in
/// ascending mean rank.
pub fn cmd_kendall(rankings: &Path, out: &mut dyn Write) -> Result<AggregateRanking<f64>, RunError> {
    let judges = difficulty::load_rankings::<f64>(rankings)?;
    let agg = difficulty::aggregate_expert_ranks(&judges)?;
    let io = |e| RunError::io(Path::new("<output>"), e);
    writeln!(out, "W={:.6}", agg.w_statistic).map_err(io)?;
    writeln!(out, "judges={} items={}", judges.len(), agg.ordered_demo_ids.len()).map_err(io)?;
    for id in &agg.ordered_demo_ids {
        writeln!(out, "{id}\t{:.4}", agg.mean_rank[id]).map_err(io)?;
    }
    Ok(agg)
}

/// Reward used by [`cmd_search`].
pub enum SearchEvaluator<'a> {
    /// Count of adjacent pairs with rising difficulty.
    Ascending,
    /// Primary F1 of the order applied to a corpus-level experiment.
    F1 { exp: &'a Experiment, gateway: &'a Gateway },
}

/// Exhaustive search over each request's candidate orders. Writes
/// `{test_id, best, best_score, evaluated}` per request.
pub fn cmd_search(
    requests: &Path,
    evaluator: &SearchEvaluator<'_>,
    shared_scores: Option<&BTreeMap<String, f64>>,
    max_n: usize,
    strict: bool,
    out: &mut dyn Write,
) -> Result<CommandSummary, RunError> {
    let mut summary = CommandSummary::default();
    for (line, rec) in records::<OrderRequest>(requests)? {
        let req = match rec {
            Ok(r) => r,
            Err(e) => {
                summary.fail(strict, format!("line {line}"), e)?;
                continue;
            }
        };
        let loc = format!("line {line} ({})", req.test_id);
        let result = match evaluator {
            SearchEvaluator::Ascending => {
                let scores = req.scores.as_ref().or(shared_scores);
                let missing = req.candidates.iter().find(|c| !scores.is_some_and(|s| s.contains_key(*c)));
                if let Some(c) = missing {
                    summary.fail(strict, loc, format!("no score for {c:?}"))?;
                    continue;
                }
                let scores = scores.expect("checked above");
                curriculum::exhaustive_order_search(&req.test_id, &req.candidates, curriculum::ascending_pairs_evaluator(scores), max_n)
                    .map_err(|e| e.to_string())
            }
            SearchEvaluator::F1 { exp, gateway } => {
                let mut first_error = None;
                let r = curriculum::exhaustive_order_search(
                    &req.test_id,
                    &req.candidates,
                    |order: &[String]| match evaluate_fixed_order(exp, gateway, order) {
                        Ok(f1) => f1,
                        Err(e) => {
                            first_error.get_or_insert(e.to_string());
                            f64::NEG_INFINITY
                        }
                    },
                    max_n,
                );
                match first_error {
                    Some(e) => Err(e),
                    None => r.map_err(|e| e.to_string()),
                }
            }
        };
        match result {
            Ok(r) => {
                emit(
                    out,
                    &json!({
                        "test_id": req.test_id,
                        "best": r.best.ordered_demo_ids,
                        "best_score": r.best_score,
                        "evaluated": r.table.len(),
                    }),
                )?;
                summary.written += 1;
            }
            Err(e) => summary.fail(strict, loc, e)?,
        }
    }
    Ok(summary)
}

/// Renders the aggregates of several runs as one table. Each input is a
/// `metrics.json` file or a run directory holding one. The baseline
/// defaults to the first file's.
pub fn cmd_report(inputs: &[PathBuf], baseline: Option<&str>, format: ReportFormat) -> Result<String, RunError> {
    if inputs.is_empty() {
        return Err(RunError::Config("report needs at least one metrics file".into()));
    }
    let mut files = Vec::with_capacity(inputs.len());
    for p in inputs {
        let path = if p.is_dir() { p.join(METRICS_FILE) } else { p.clone() };
        let text = fs::read_to_string(&path).map_err(|e| RunError::io(&path, e))?;
        let f: MetricsFile = serde_json::from_str(&text).map_err(|e| RunError::io(&path, e))?;
        files.push(f);
    }
    let baseline = baseline.map(str::to_string).or_else(|| files[0].baseline.clone());
    Ok(render_table(&files, baseline.as_deref(), format))
}

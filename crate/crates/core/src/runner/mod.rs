//! Experiment orchestration: configs, persisted runs and the file-in,
//! file-out subcommands behind the CLI.
//!
//! A run directory holds
//!
//! ```text
//! runs/<run_id>/
//!   manifest.json     config snapshot, code version, timestamps, amendments
//!   orders.jsonl      one OrderPlan per (strategy, seed, test_id)
//!   predictions.jsonl one prediction per (strategy, seed, test_id)
//!   metrics.json      per-seed reports, per-strategy aggregates, deltas
//!   report.txt        the metrics as a table
//! ```
//!
//! Every line-delimited file is sorted by `(strategy, seed, test_id)`.

mod commands;
mod config;
mod report;
mod run;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Label};
use crate::curriculum::OrderPlan;
use crate::difficulty::DifficultyError;
use crate::evaluation::EvalError;
use crate::gateway::GatewayError;
use crate::retrieval::RetrievalError;

pub use commands::{
    cmd_eval, cmd_kendall, cmd_order, cmd_report, cmd_score, cmd_search, load_scores, CommandSummary, OrderRequest,
    RecordError, SearchEvaluator,
};
pub use config::{ExperimentConfig, Level, Overrides, StrategySpec};
pub use report::{render_table, MetricsFile, ReportFormat, RunIncomplete};
pub use run::{
    build_gateway, cmd_run, evaluate_fixed_order, run_experiment, Amendment, Experiment, RunManifest, RunOutcome,
    RunStatus,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORDERS_FILE: &str = "orders.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Difficulty(#[from] DifficultyError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Record(RecordError),
    #[error("strict mode: {0}")]
    Strict(String),
}

impl RunError {
    pub(crate) fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// One generated answer inside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub strategy: String,
    pub seed: u64,
    pub test_id: String,
    pub raw_text: String,
    pub parsed: Label,
}

/// The order a prediction was made with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub strategy: String,
    pub seed: u64,
    pub plan: OrderPlan<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    Score,
    Order,
    Render,
    Generate,
}

/// A work item that produced no prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub strategy: String,
    pub seed: u64,
    pub test_id: String,
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{} failed at {:?}: {}",
            self.strategy, self.seed, self.test_id, self.stage, self.message
        )
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{self, Demonstration, Label, TaskSpec};
use crate::curriculum::{order_demonstrations, OrderPlan, StrategyKind};
use crate::difficulty::{self, AggregateRanking};
use crate::evaluation::{self, Prediction};
use crate::gateway::{BackendKind, Gateway, MockBackend};
use crate::hash::fnv1a64;
use crate::jsonl;
use crate::promptkit::{self, RenderedPrompt};
use crate::retrieval::{self, CandidateSet, EmbeddingCache};

use super::config::{ExperimentConfig, Level, StrategySpec};
use super::report::{self, MetricsFile};
use super::{
    Failure, OrderRecord, PredictionRecord, RunError, Stage, MANIFEST_FILE, METRICS_FILE, ORDERS_FILE,
    PREDICTIONS_FILE, REPORT_FILE,
};

/// Written once before the first backend call; later events are appended
/// to `amendments` and nothing else changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub code_version: String,
    pub started_at: u64,
    pub config: ExperimentConfig,
    pub task: TaskSpec,
    pub model_name: String,
    /// File holding the OrderPlan behind every prediction.
    pub orders_file: String,
    #[serde(default)]
    pub amendments: Vec<Amendment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amendment {
    pub at: u64,
    pub event: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub failures: Vec<Failure>,
    /// Predictions made by this invocation (resumed ones excluded).
    pub new_predictions: usize,
    pub metrics: MetricsFile,
}

/// A config with its task, pool, test set and expert ranking loaded and
/// cross-checked.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub spec: TaskSpec,
    pub pool: Vec<Demonstration>,
    pub tests: Vec<Demonstration>,
    pub human: Option<AggregateRanking<f64>>,
    pool_index: BTreeMap<String, usize>,
}

impl Experiment {
    pub fn load(cfg: ExperimentConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let spec = TaskSpec::load(&cfg.task)?;
        let pool = corpus::load_pool(&cfg.pool, &spec)?;
        let tests = corpus::load_pool(&cfg.test, &spec)?;
        if tests.is_empty() {
            return Err(RunError::Config(format!("test file {} has no records", cfg.test.display())));
        }
        if pool.is_empty() {
            return Err(RunError::Config(format!("pool file {} has no records", cfg.pool.display())));
        }
        cfg.validate_against(&spec, &pool)?;
        let human = match &cfg.rankings {
            Some(path) => Some(difficulty::aggregate_expert_ranks(&difficulty::load_rankings::<f64>(path)?)?),
            None => None,
        };
        let pool_index = pool.iter().enumerate().map(|(i, d)| (d.demo_id.clone(), i)).collect();
        Ok(Self {
            cfg,
            spec,
            pool,
            tests,
            human,
            pool_index,
        })
    }

    pub fn demo(&self, id: &str) -> Option<&Demonstration> {
        self.pool_index.get(id).map(|&i| &self.pool[i])
    }

    pub fn golds(&self) -> BTreeMap<String, Label> {
        self.tests.iter().map(|t| (t.demo_id.clone(), t.gold.clone())).collect()
    }

    /// The configured run id, or one derived from the config so that
    /// rerunning an unchanged config resumes the same directory.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.cfg.run_id {
            return id.clone();
        }
        let mut snapshot = self.cfg.clone();
        snapshot.runs_dir = PathBuf::new();
        let text = serde_json::to_string(&snapshot).expect("config serializes");
        format!("{}-{:016x}", self.spec.task_id, fnv1a64(&text))
    }

    fn render(&self, plan: &OrderPlan<f64>, test: &Demonstration, tag: bool) -> Result<RenderedPrompt, String> {
        let demos = plan
            .ordered_demo_ids
            .iter()
            .map(|id| self.demo(id).ok_or_else(|| format!("unknown demonstration {id:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        let tag = tag.then_some(test.demo_id.as_str());
        promptkit::render(&self.cfg.template, &self.spec, &demos, test.input(), tag).map_err(|e| e.to_string())
    }
}

/// The backend named by the config. The mock answers from the config's
/// prediction table, if any.
pub fn build_gateway(exp: &Experiment) -> Result<Gateway, RunError> {
    let b = &exp.cfg.backend;
    match b.backend_kind {
        BackendKind::Http => Ok(Gateway::http(b)?),
        BackendKind::Mock => {
            let mut mock = MockBackend::for_task(&exp.spec);
            if !b.model_name.is_empty() {
                mock = mock.with_model_name(b.model_name.clone());
            }
            if let Some(path) = &exp.cfg.mock_predictions {
                mock = mock.with_predictions(load_mock_predictions(path)?);
            }
            Ok(Gateway::new(Arc::new(mock), b.max_in_flight))
        }
    }
}

#[derive(Deserialize)]
struct MockLine {
    test_id: String,
    text: String,
}

fn load_mock_predictions(path: &Path) -> Result<BTreeMap<String, String>, RunError> {
    let lines: Vec<(usize, MockLine)> =
        jsonl::read_records(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    Ok(lines.into_iter().map(|(_, l)| (l.test_id, l.text)).collect())
}

/// Loads the config's inputs, builds its backend and runs it.
pub fn cmd_run(cfg: ExperimentConfig, strict: bool) -> Result<RunOutcome, RunError> {
    let exp = Experiment::load(cfg)?;
    let gateway = build_gateway(&exp)?;
    run_experiment(&exp, &gateway, strict)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    write_file(path, &text)
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let recs = jsonl::read_records(path).map_err(|e| RunError::io(path, e))?;
    Ok(recs.into_iter().map(|(_, r)| r).collect())
}

type Key = (String, u64, String);

struct Item<'a> {
    strategy: &'a StrategySpec,
    seed: u64,
    test: &'a Demonstration,
}

impl Item<'_> {
    fn key(&self) -> Key {
        (self.strategy.label().to_string(), self.seed, self.test.demo_id.clone())
    }

    fn fail(&self, stage: Stage, message: impl Into<String>) -> Failure {
        Failure {
            strategy: self.strategy.label().to_string(),
            seed: self.seed,
            test_id: self.test.demo_id.clone(),
            stage,
            message: message.into(),
        }
    }
}

/// Retrieves each test's top-k pool entries. A test whose candidates cannot
/// be built maps to the reason.
fn instance_candidates(
    exp: &Experiment,
    gateway: &Gateway,
    tests: &[&Demonstration],
) -> Result<BTreeMap<String, Result<CandidateSet<f64>, String>>, RunError> {
    let cache = match &exp.cfg.embedding_cache {
        Some(p) => EmbeddingCache::open(p)?,
        None => EmbeddingCache::in_memory(),
    };
    let pool_texts: Vec<String> = exp.pool.iter().map(Demonstration::query_text).collect();
    let test_texts: Vec<String> = tests.iter().map(|t| t.query_text()).collect();
    let all: Vec<&str> = pool_texts.iter().chain(&test_texts).map(String::as_str).collect();
    let vectors = cache.get_or_embed_each(&all, gateway)?;

    let mut pool = BTreeMap::new();
    let mut pool_error = None;
    for (d, text) in exp.pool.iter().zip(&pool_texts) {
        match &vectors[text] {
            Ok(v) => {
                pool.insert(d.demo_id.clone(), v.clone());
            }
            Err(e) => {
                pool_error.get_or_insert_with(|| format!("embedding pool entry {:?}: {e}", d.demo_id));
            }
        }
    }
    let k = exp.cfg.k_for(&exp.spec);
    Ok(tests
        .iter()
        .zip(&test_texts)
        .map(|(t, text)| {
            let set = match (&pool_error, &vectors[text]) {
                (Some(e), _) => Err(e.clone()),
                (None, Err(e)) => Err(format!("embedding test input: {e}")),
                (None, Ok(q)) => retrieval::top_k(&t.demo_id, q, &pool, k).map_err(|e| e.to_string()),
            };
            (t.demo_id.clone(), set)
        })
        .collect())
}

/// Runs every (strategy, seed, test) item not yet in the run directory,
/// then rewrites the sorted outputs, metrics and report.
///
/// Per-item backend failures are recorded, not fatal; with `strict` the
/// first of them is returned as an error once the outputs are written.
pub fn run_experiment(exp: &Experiment, gateway: &Gateway, strict: bool) -> Result<RunOutcome, RunError> {
    let cfg = &exp.cfg;
    let run_id = exp.run_id();
    let run_dir = cfg.runs_dir.join(&run_id);
    fs::create_dir_all(&run_dir).map_err(|e| RunError::io(&run_dir, e))?;

    let manifest_path = run_dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| RunError::io(&manifest_path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| RunError::io(&manifest_path, e))?;
        if m.config != *cfg {
            return Err(RunError::Config(format!(
                "run {run_id:?} already exists with a different config"
            )));
        }
        m.amendments.push(Amendment {
            at: now(),
            event: "resumed".into(),
            details: Value::Null,
        });
        m
    } else {
        RunManifest {
            run_id: run_id.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            config: cfg.clone(),
            task: exp.spec.clone(),
            model_name: gateway.model_name().to_string(),
            orders_file: ORDERS_FILE.into(),
            amendments: Vec::new(),
        }
    };
    write_manifest(&manifest_path, &manifest)?;

    let mut predictions: BTreeMap<Key, PredictionRecord> = read_optional(&run_dir.join(PREDICTIONS_FILE))?
        .into_iter()
        .map(|p: PredictionRecord| ((p.strategy.clone(), p.seed, p.test_id.clone()), p))
        .collect();
    let mut orders: BTreeMap<Key, OrderRecord> = read_optional(&run_dir.join(ORDERS_FILE))?
        .into_iter()
        .map(|o: OrderRecord| ((o.strategy.clone(), o.seed, o.plan.test_id.clone()), o))
        .collect();
    // A prediction without its order cannot be audited, so it is redone.
    predictions.retain(|k, _| orders.contains_key(k));
    orders.retain(|k, _| predictions.contains_key(k));

    let pending: Vec<Item> = cfg
        .strategies
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .flat_map(|(strategy, seed)| exp.tests.iter().map(move |test| Item { strategy, seed, test }))
        .filter(|it| !predictions.contains_key(&it.key()))
        .collect();

    let (fresh, failures) = execute(exp, gateway, &pending)?;
    let new_predictions = fresh.len();
    for (key, (order, pred)) in fresh {
        orders.insert(key.clone(), order);
        predictions.insert(key, pred);
    }

    let preds: Vec<&PredictionRecord> = predictions.values().collect();
    let ords: Vec<&OrderRecord> = orders.values().collect();
    write_file(&run_dir.join(PREDICTIONS_FILE), &jsonl::to_string(&preds))?;
    write_file(&run_dir.join(ORDERS_FILE), &jsonl::to_string(&ords))?;

    let metrics = report::build_metrics(exp, &predictions)?;
    let mut metrics_text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    metrics_text.push('\n');
    write_file(&run_dir.join(METRICS_FILE), &metrics_text)?;
    let report_text = report::run_report(&metrics, exp);
    write_file(&run_dir.join(REPORT_FILE), &report_text)?;

    let status = if failures.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Partial
    };
    manifest.amendments.push(Amendment {
        at: now(),
        event: "finished".into(),
        details: json!({
            "status": status,
            "new_predictions": new_predictions,
            "failure_count": failures.len(),
            "failures": failures,
            "expert_w": exp.human.as_ref().map(|h| h.w_statistic),
        }),
    });
    write_manifest(&manifest_path, &manifest)?;

    if strict {
        if let Some(f) = failures.first() {
            return Err(RunError::Strict(f.to_string()));
        }
    }
    Ok(RunOutcome {
        run_id,
        run_dir,
        status,
        failures,
        new_predictions,
        metrics,
    })
}

type Fresh = BTreeMap<Key, (OrderRecord, PredictionRecord)>;

/// Candidate ids in retrieval order and their similarities to the test input.
type Candidates = (Vec<String>, BTreeMap<String, f64>);

/// Candidates, scores, orders, prompts and generations for `items`.
fn execute(exp: &Experiment, gateway: &Gateway, items: &[Item]) -> Result<(Fresh, Vec<Failure>), RunError> {
    let mut failures = Vec::new();
    if items.is_empty() {
        return Ok((BTreeMap::new(), failures));
    }
    let mut tests: Vec<&Demonstration> = Vec::new();
    let mut seen = BTreeSet::new();
    for it in items {
        if seen.insert(it.test.demo_id.as_str()) {
            tests.push(it.test);
        }
    }

    // Candidate ids per test, with similarities at instance level.
    let candidates: BTreeMap<String, Result<Candidates, String>> = match exp.cfg.level {
        Level::Instance => instance_candidates(exp, gateway, &tests)?
            .into_iter()
            .map(|(id, set)| (id, set.map(|s| (s.demo_ids(), s.similarity_map()))))
            .collect(),
        Level::Corpus => tests
            .iter()
            .map(|t| (t.demo_id.clone(), Ok((exp.cfg.corpus_demos.clone(), BTreeMap::new()))))
            .collect(),
    };

    // Difficulty is a property of the demonstration, so each is scored once.
    let mut to_score = BTreeSet::new();
    for it in items.iter().filter(|it| is_perplexity(it.strategy.kind)) {
        if let Ok((ids, _)) = &candidates[&it.test.demo_id] {
            to_score.extend(ids.iter().map(String::as_str));
        }
    }
    let demos: Vec<&Demonstration> = to_score.iter().filter_map(|id| exp.demo(id)).collect();
    let scored = difficulty::complexity_many::<f64>(&demos, &exp.spec, &exp.cfg.template, gateway, exp.cfg.normalize_perplexity);
    let mut complexity = BTreeMap::new();
    let mut score_errors = BTreeMap::new();
    for (id, r) in scored {
        match r {
            Ok(s) => {
                complexity.insert(id, s.complexity);
            }
            Err(e) => {
                score_errors.insert(id, e.to_string());
            }
        }
    }

    let tag = gateway.kind() == BackendKind::Mock;
    let mut planned = Vec::new();
    for it in items {
        let (ids, sims) = match &candidates[&it.test.demo_id] {
            Ok(c) => c,
            Err(e) => {
                failures.push(it.fail(Stage::Embed, e.clone()));
                continue;
            }
        };
        let scores = match it.strategy.kind {
            k if is_perplexity(k) => {
                if let Some((id, e)) = ids.iter().find_map(|id| score_errors.get(id).map(|e| (id, e))) {
                    failures.push(it.fail(Stage::Score, format!("scoring {id:?}: {e}")));
                    continue;
                }
                Some(&complexity)
            }
            StrategyKind::SimilarityAscending => Some(sims),
            StrategyKind::HumanCurriculum => exp.human.as_ref().map(|h| &h.mean_rank),
            _ => None,
        };
        let plan = match order_demonstrations(&it.test.demo_id, ids, &it.strategy.ordering(it.seed), scores) {
            Ok(p) => p,
            Err(e) => {
                failures.push(it.fail(Stage::Order, e.to_string()));
                continue;
            }
        };
        match exp.render(&plan, it.test, tag) {
            Ok(prompt) => planned.push((it, plan, prompt)),
            Err(e) => failures.push(it.fail(Stage::Render, e)),
        }
    }

    // Identical prompts (seed-free strategies across seeds) are sent once.
    let mut unique: BTreeMap<String, RenderedPrompt> = BTreeMap::new();
    for (_, _, p) in &planned {
        unique.entry(p.text.clone()).or_insert_with(|| p.clone());
    }
    let generated = gateway.generate_many(unique.into_iter().collect());

    let mut fresh = BTreeMap::new();
    for (it, plan, prompt) in planned {
        match &generated[&prompt.text] {
            Ok(raw) => {
                let p = Prediction::new(it.test.demo_id.clone(), raw.clone(), &exp.spec);
                let (strategy, seed, test_id) = it.key();
                let order = OrderRecord {
                    strategy: strategy.clone(),
                    seed,
                    plan,
                };
                let pred = PredictionRecord {
                    strategy: strategy.clone(),
                    seed,
                    test_id: test_id.clone(),
                    raw_text: p.raw_text,
                    parsed: p.parsed,
                };
                fresh.insert((strategy, seed, test_id), (order, pred));
            }
            Err(e) => failures.push(it.fail(Stage::Generate, e.to_string())),
        }
    }
    Ok((fresh, failures))
}

fn is_perplexity(k: StrategyKind) -> bool {
    matches!(k, StrategyKind::Iccl | StrategyKind::AntiIccl)
}

/// Primary F1 of one corpus-level order applied to every test input.
/// Used as the reward when searching over orders.
pub fn evaluate_fixed_order(exp: &Experiment, gateway: &Gateway, order: &[String]) -> Result<f64, RunError> {
    let plan = |t: &Demonstration| OrderPlan {
        test_id: t.demo_id.clone(),
        ordered_demo_ids: order.to_vec(),
        strategy: crate::curriculum::OrderingStrategy::fixed(order.to_vec()),
        provenance: BTreeMap::new(),
    };
    let tag = gateway.kind() == BackendKind::Mock;
    let mut prompts = Vec::with_capacity(exp.tests.len());
    for t in &exp.tests {
        let p = exp.render(&plan(t), t, tag).map_err(RunError::Config)?;
        prompts.push((t.demo_id.clone(), p));
    }
    let mut preds = Vec::with_capacity(prompts.len());
    for (id, r) in gateway.generate_many(prompts) {
        preds.push(Prediction::new(id, r?, &exp.spec));
    }
    let report = evaluation::score_run::<f64>(&preds, &exp.golds(), &exp.spec)?;
    Ok(report.primary_f1().unwrap_or(0.0))
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Demonstration, TaskSpec};
use crate::curriculum::{OrderingStrategy, StrategyKind};
use crate::gateway::{BackendConfig, BackendKind};
use crate::promptkit::{self, TemplateFamily, TemplateKind};

use super::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// One fixed demonstration set shared by every test input.
    Corpus,
    /// Demonstrations retrieved per test input by embedding similarity.
    #[default]
    Instance,
}

/// One arm of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Label used in outputs; defaults to the kind's name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_order: Option<Vec<String>>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            name: None,
            fixed_order: None,
        }
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.as_str())
    }

    /// The ordering to apply under run seed `seed`. Only random ordering
    /// consumes the seed.
    pub fn ordering(&self, seed: u64) -> OrderingStrategy {
        match self.kind {
            StrategyKind::Random => OrderingStrategy::random(seed),
            StrategyKind::Fixed => OrderingStrategy::fixed(self.fixed_order.clone().unwrap_or_default()),
            k => OrderingStrategy::new(k),
        }
    }
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// A whole experiment, read from one TOML file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: PathBuf,
    pub pool: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub level: Level,
    /// Candidates per test input; defaults to the task's demo count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub normalize_perplexity: bool,
    #[serde(default)]
    pub template: TemplateFamily,
    #[serde(default)]
    pub backend: BackendConfig,
    pub strategies: Vec<StrategySpec>,
    /// Demonstration ids used for every test input at corpus level.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corpus_demos: Vec<String>,
    /// Expert rankings, needed by `human_curriculum`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rankings: Option<PathBuf>,
    /// `{test_id, text}` lines answered by the mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_predictions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_cache: Option<PathBuf>,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Strategy the deltas are computed against; defaults to `random` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

/// Command-line values that replace their config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub template: Option<TemplateKind>,
    pub strategies: Option<Vec<StrategyKind>>,
    pub seeds: Option<Vec<u64>>,
    pub k: Option<usize>,
    pub normalize_perplexity: Option<bool>,
    pub run_id: Option<String>,
    pub runs_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.task);
        join(&mut self.pool);
        join(&mut self.test);
        join(&mut self.runs_dir);
        for p in [&mut self.rankings, &mut self.mock_predictions, &mut self.embedding_cache]
            .into_iter()
            .flatten()
        {
            join(p);
        }
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(b) = o.backend {
            self.backend.backend_kind = b;
        }
        if let Some(t) = o.template {
            self.template.kind = t;
        }
        if let Some(kinds) = o.strategies {
            // Keep configured parameters (name, fixed order) for kinds that stay.
            let old = std::mem::take(&mut self.strategies);
            self.strategies = kinds
                .into_iter()
                .map(|k| old.iter().find(|s| s.kind == k).cloned().unwrap_or_else(|| StrategySpec::new(k)))
                .collect();
        }
        if let Some(s) = o.seeds {
            self.seeds = s;
        }
        if o.k.is_some() {
            self.k = o.k;
        }
        if let Some(n) = o.normalize_perplexity {
            self.normalize_perplexity = n;
        }
        if o.run_id.is_some() {
            self.run_id = o.run_id;
        }
        if let Some(d) = o.runs_dir {
            self.runs_dir = d;
        }
    }

    pub fn k_for(&self, spec: &TaskSpec) -> usize {
        self.k.unwrap_or(spec.default_demo_count)
    }

    pub fn baseline_label(&self) -> Option<String> {
        self.baseline.clone().or_else(|| {
            self.strategies
                .iter()
                .find(|s| s.kind == StrategyKind::Random)
                .map(|s| s.label().to_string())
        })
    }

    /// Checks that need only the config itself.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds contain duplicates".into());
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        let mut labels = BTreeSet::new();
        for s in &self.strategies {
            if !labels.insert(s.label()) {
                return bad(format!("strategy name {:?} is used twice", s.label()));
            }
            match (self.level, s.kind) {
                (Level::Corpus, StrategyKind::SimilarityAscending) => {
                    return bad("similarity_ascending needs level = \"instance\"".into())
                }
                (Level::Instance, StrategyKind::Fixed) => {
                    return bad("fixed ordering needs level = \"corpus\"".into())
                }
                _ => {}
            }
            if s.kind == StrategyKind::Fixed && s.fixed_order.is_none() {
                return bad(format!("strategy {:?} needs fixed_order", s.label()));
            }
            if s.kind == StrategyKind::HumanCurriculum && self.rankings.is_none() {
                return bad("human_curriculum needs a rankings file".into());
            }
        }
        if let Some(b) = &self.baseline {
            if !labels.contains(b.as_str()) {
                return bad(format!("baseline {b:?} is not one of the strategies"));
            }
        }
        if self.k == Some(0) {
            return bad("k must be positive".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return bad(format!("run_id {id:?} is not a plain directory name"));
            }
        }
        self.backend.validate().map_err(|e| RunError::Config(e.to_string()))
    }

    /// Checks that need the loaded task and pool.
    pub fn validate_against(&self, spec: &TaskSpec, pool: &[Demonstration]) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        let ids: BTreeSet<&str> = pool.iter().map(|d| d.demo_id.as_str()).collect();
        match self.level {
            Level::Corpus => {
                if self.corpus_demos.len() != spec.default_demo_count {
                    return bad(format!(
                        "corpus level needs {} corpus_demos, got {}",
                        spec.default_demo_count,
                        self.corpus_demos.len()
                    ));
                }
                let uniq: BTreeSet<&str> = self.corpus_demos.iter().map(String::as_str).collect();
                if uniq.len() != self.corpus_demos.len() {
                    return bad("corpus_demos contains duplicates".into());
                }
                if let Some(missing) = self.corpus_demos.iter().find(|d| !ids.contains(d.as_str())) {
                    return bad(format!("corpus demo {missing:?} is not in the pool"));
                }
                for s in &self.strategies {
                    if let Some(order) = &s.fixed_order {
                        let o: BTreeSet<&str> = order.iter().map(String::as_str).collect();
                        if order.len() != uniq.len() || o != uniq {
                            return bad(format!("fixed_order of {:?} is not a permutation of corpus_demos", s.label()));
                        }
                    }
                }
            }
            Level::Instance => {
                if !self.corpus_demos.is_empty() {
                    return bad("corpus_demos is only used at corpus level".into());
                }
                let k = self.k_for(spec);
                if k == 0 || k > pool.len() {
                    return bad(format!("k = {k} is outside 1..={}", pool.len()));
                }
            }
        }
        // Fails early on a family that needs a system message the config lacks.
        if let Some(d) = pool.first() {
            promptkit::render(&self.template, spec, &[], d.input(), None).map_err(|e| RunError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

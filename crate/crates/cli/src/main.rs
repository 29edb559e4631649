use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use iccl_core::corpus::TaskSpec;
use iccl_core::curriculum::{OrderingStrategy, StrategyKind, DEFAULT_MAX_SEARCH};
use iccl_core::gateway::{BackendConfig, MockBackend};
use iccl_core::promptkit::{TemplateFamily, TemplateKind};
use iccl_core::runner::{
    self, CommandSummary, Experiment, ExperimentConfig, Overrides, ReportFormat, RunStatus, SearchEvaluator,
};
use iccl_core::{BackendKind, Gateway};

/// Exit code when the command finished but some records or work items failed.
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "iccl", version, about = "In-context curriculum learning harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write runs/<run_id>/.
    Run(RunArgs),
    /// Score demonstration difficulty (label perplexity).
    Score(ScoreArgs),
    /// Order candidate demonstrations.
    Order(OrderArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Kendall's W and mean ranks of expert rankings.
    Kendall(KendallArgs),
    /// Exhaustive search over demonstration orders.
    Search(SearchArgs),
    /// Table of one or more runs' aggregates.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Mock,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Http => BackendKind::Http,
            BackendArg::Mock => BackendKind::Mock,
        }
    }
}

fn parse_template(s: &str) -> Result<TemplateKind, String> {
    TemplateKind::parse(s).ok_or_else(|| format!("unknown template {s:?} (mixtral, llama2, qwen, messages)"))
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    StrategyKind::parse(s).ok_or_else(|| format!("unknown strategy {s:?}"))
}

/// Settings shared by every command that talks to a backend.
#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (TOML); flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// mixtral, llama2, qwen or messages.
    #[arg(long, value_parser = parse_template)]
    template: Option<TemplateKind>,
    #[arg(long)]
    system_message: Option<String>,
    /// Base URL of the HTTP backend.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Stop at the first failing record.
    #[arg(long)]
    strict: bool,
}

impl Common {
    fn load_config(&self) -> Result<Option<ExperimentConfig>> {
        self.config
            .as_deref()
            .map(|p| ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()
    }

    fn template(&self, cfg: Option<&ExperimentConfig>) -> TemplateFamily {
        let mut fam = cfg.map(|c| c.template.clone()).unwrap_or_default();
        if let Some(k) = self.template {
            fam.kind = k;
        }
        if let Some(s) = &self.system_message {
            fam.system_message = Some(s.clone());
        }
        fam
    }

    fn backend(&self, cfg: Option<&ExperimentConfig>) -> BackendConfig {
        let mut b = cfg.map(|c| c.backend.clone()).unwrap_or_default();
        if let Some(k) = self.backend {
            b.backend_kind = k.into();
        }
        if let Some(u) = &self.base_url {
            b.base_url = u.clone();
        }
        if let Some(m) = &self.model {
            b.model_name = m.clone();
        }
        b
    }

    fn gateway(&self, cfg: Option<&ExperimentConfig>, spec: &TaskSpec) -> Result<Gateway> {
        let b = self.backend(cfg);
        Ok(match b.backend_kind {
            BackendKind::Http => Gateway::http(&b)?,
            BackendKind::Mock => Gateway::new(Arc::new(MockBackend::for_task(spec)), b.max_in_flight),
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated strategies, e.g. iccl,random.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategy: Option<Vec<StrategyKind>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    k: Option<usize>,
    /// Length-normalize perplexity by token count.
    #[arg(long)]
    normalize_ppl: bool,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    runs_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    normalize_ppl: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OrderArgs {
    /// Lines of {test_id, candidates, scores?}.
    #[arg(long)]
    requests: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: StrategyKind,
    /// Seed for random ordering (the first one is used).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output of `iccl score`, used when a request has no scores.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    fixed_order: Option<Vec<String>>,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    /// Gold labels in pool format; defaults to the config's test file.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KendallArgs {
    /// Lines of {judge, demo_id, rank}.
    rankings: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorArg {
    /// Count of adjacent pairs with rising difficulty.
    Ascending,
    /// F1 of a corpus-level run (needs --config).
    F1,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    requests: PathBuf,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ascending")]
    evaluator: EvaluatorArg,
    #[arg(long, default_value_t = DEFAULT_MAX_SEARCH)]
    max_n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.json files or run directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn finish(summary: CommandSummary, out: &mut dyn Write) -> Result<ExitCode> {
    out.flush()?;
    for e in &summary.errors {
        eprintln!("error: {e}");
    }
    if summary.errors.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} records written, {} failed", summary.written, summary.errors.len());
        Ok(ExitCode::from(EXIT_PARTIAL))
    }
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = a.common.load_config()?.ok_or_else(|| anyhow!("run needs --config"))?;
    cfg.template = a.common.template(Some(&cfg));
    cfg.backend = a.common.backend(Some(&cfg));
    cfg.apply(Overrides {
        strategies: a.strategy,
        seeds: a.seeds,
        k: a.k,
        normalize_perplexity: a.normalize_ppl.then_some(true),
        run_id: a.run_id,
        runs_dir: a.runs_dir,
        ..Overrides::default()
    });
    let out = runner::cmd_run(cfg, a.common.strict)?;
    let report = fs::read_to_string(out.run_dir.join(runner::REPORT_FILE))?;
    print!("{report}");
    println!(
        "\nrun {} {}: {} new predictions, {} failures, written to {}",
        out.run_id,
        match out.status {
            RunStatus::Complete => "complete",
            RunStatus::Partial => "partial",
        },
        out.new_predictions,
        out.failures.len(),
        out.run_dir.display()
    );
    for f in &out.failures {
        eprintln!("error: {f}");
    }
    Ok(match out.status {
        RunStatus::Complete => ExitCode::SUCCESS,
        RunStatus::Partial => ExitCode::from(EXIT_PARTIAL),
    })
}

fn score(a: ScoreArgs) -> Result<ExitCode> {
    let cfg = a.common.load_config()?;
    let task = a.task.or(cfg.as_ref().map(|c| c.task.clone())).ok_or_else(|| anyhow!("score needs --task or --config"))?;
    let pool = a.pool.or(cfg.as_ref().map(|c| c.pool.clone())).ok_or_else(|| anyhow!("score needs --pool or --config"))?;
    let spec = TaskSpec::load(&task)?;
    let gw = a.common.gateway(cfg.as_ref(), &spec)?;
    let normalize = a.normalize_ppl || cfg.as_ref().is_some_and(|c| c.normalize_perplexity);
    let mut out = output(a.out.as_deref())?;
    let s = runner::cmd_score(&spec, &pool, &a.common.template(cfg.as_ref()), &gw, normalize, a.common.strict, &mut out)?;
    finish(s, &mut out)
}

fn order(a: OrderArgs) -> Result<ExitCode> {
    let strategy = match a.strategy {
        StrategyKind::Random => {
            let seed = a.seeds.and_then(|s| s.first().copied()).ok_or_else(|| anyhow!("random ordering needs --seeds"))?;
            OrderingStrategy::random(seed)
        }
        StrategyKind::Fixed => {
            OrderingStrategy::fixed(a.fixed_order.ok_or_else(|| anyhow!("fixed ordering needs --fixed-order"))?)
        }
        k => OrderingStrategy::new(k),
    };
    let scores = a.scores.as_deref().map(runner::load_scores).transpose()?;
    let mut out = output(a.out.as_deref())?;
    let s = runner::cmd_order(&a.requests, &strategy, scores.as_ref(), a.strict, &mut out)?;
    finish(s, &mut out)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let task = a.task.or(cfg.as_ref().map(|c| c.task.clone())).ok_or_else(|| anyhow!("eval needs --task or --config"))?;
    let gold = a.gold.or(cfg.as_ref().map(|c| c.test.clone())).ok_or_else(|| anyhow!("eval needs --gold or --config"))?;
    let spec = TaskSpec::load(&task)?;
    let mut out = output(a.out.as_deref())?;
    let s = runner::cmd_eval(&spec, &gold, &a.predictions, a.strict, &mut out)?;
    finish(s, &mut out)
}

fn kendall(a: KendallArgs) -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    runner::cmd_kendall(&a.rankings, &mut out)?;
    Ok(ExitCode::SUCCESS)
}

fn search(a: SearchArgs) -> Result<ExitCode> {
    let scores = a.scores.as_deref().map(runner::load_scores).transpose()?;
    let mut out = output(a.out.as_deref())?;
    let s = match a.evaluator {
        EvaluatorArg::Ascending => {
            runner::cmd_search(&a.requests, &SearchEvaluator::Ascending, scores.as_ref(), a.max_n, a.common.strict, &mut out)?
        }
        EvaluatorArg::F1 => {
            let mut cfg = a.common.load_config()?.ok_or_else(|| anyhow!("the f1 evaluator needs --config"))?;
            cfg.template = a.common.template(Some(&cfg));
            cfg.backend = a.common.backend(Some(&cfg));
            let exp = Experiment::load(cfg)?;
            let gateway = runner::build_gateway(&exp)?;
            let ev = SearchEvaluator::F1 { exp: &exp, gateway: &gateway };
            runner::cmd_search(&a.requests, &ev, scores.as_ref(), a.max_n, a.common.strict, &mut out)?
        }
    };
    finish(s, &mut out)
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let format = if a.csv { ReportFormat::Csv } else { ReportFormat::Text };
    let text = runner::cmd_report(&a.inputs, a.baseline.as_deref(), format)?;
    let mut out = output(a.out.as_deref())?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Score(a) => score(a),
        Command::Order(a) => order(a),
        Command::Eval(a) => eval(a),
        Command::Kendall(a) => kendall(a),
        Command::Search(a) => search(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dka_core::backends::mock::Fixtures;
use dka_core::backends::ResponseCache;
use dka_core::config::{load_config_with, EndpointPolicy};
use dka_core::eval::{aggregate, load_annotations, load_dataset, load_predictions, score_predictions, EvalError};
use dka_core::rank::ExampleIndex;
use dka_core::{Ablation, Pipeline, PipelineConfig, RunDir, SelectorStrategy, StageBackends};

#[derive(Parser)]
#[command(name = "dka", version, about = "Knowledge-based VQA with disentangled knowledge acquisition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a question set and write a run directory.
    Run(RunArgs),
    /// Score an existing predictions file against annotations.
    Score(ScoreArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    NoKnowledge,
    OriginalQuestion,
    NoCaption,
    NoKnowledgeNoCaption,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::NoKnowledge => Ablation::NoKnowledge,
            AblationArg::OriginalQuestion => Ablation::OriginalQuestion,
            AblationArg::NoCaption => Ablation::NoCaption,
            AblationArg::NoKnowledgeNoCaption => Ablation::NoKnowledgeNoCaption,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Similarity,
    Random,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; endpoints may also come from the environment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// In-context example index (JSON array).
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Only run the first N questions.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Knowledge items kept after re-ranking.
    #[arg(long)]
    n: Option<usize>,
    /// In-context examples per prompt.
    #[arg(long)]
    m: Option<usize>,
    /// Ensemble size.
    #[arg(long)]
    q: Option<usize>,
    /// Knowledge statements elicited per question.
    #[arg(long)]
    r: Option<usize>,
    /// Fixture directory; runs offline against mock backends.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Response cache directory (default: config cache_dir, else <out>/cache).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value = "dka-run")]
    out: PathBuf,
    /// Write every answering prompt to <out>/traces.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predictions as {question_id: answer} or a list of records.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Largest tolerated fraction of annotated ids without a prediction.
    #[arg(long, default_value_t = 0.05)]
    max_missing: f64,
    /// Leave-one-out averaged accuracy.
    #[arg(long)]
    strict: bool,
}

/// Failures before the pipeline starts: bad flags, config, dataset, or index.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: anyhow::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| UsageError(e).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Score(args) => score(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

fn build_config(args: &RunArgs) -> anyhow::Result<PipelineConfig> {
    let policy = if args.mock.is_some() {
        EndpointPolicy::Optional
    } else {
        EndpointPolicy::Required
    };
    let mut cfg = match &args.config {
        Some(path) => load_config_with(path, policy)?,
        None => dka_core::config::load_config_from_str("", |k| std::env::var(k).ok(), policy)?,
    };
    if let Some(a) = args.ablation {
        cfg.ablation = a.into();
    }
    if let Some(s) = args.selector {
        cfg.selector_strategy = match s {
            SelectorArg::Similarity => SelectorStrategy::Similarity,
            SelectorArg::Random => SelectorStrategy::Random,
        };
    }
    if args.seed.is_some() {
        cfg.random_seed = args.seed;
    }
    for (value, slot) in [
        (args.n, &mut cfg.n_selected_knowledge),
        (args.m, &mut cfg.m_examples),
        (args.q, &mut cfg.q_ensemble),
        (args.r, &mut cfg.r_retrieved),
    ] {
        if let Some(v) = value {
            *slot = v;
        }
    }
    cfg.validate(policy)?;
    if args.workers == 0 {
        bail!("--workers must be >= 1");
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let cfg = usage(build_config(&args))?;
    let mock_path = |name: &str| args.mock.as_ref().map(|d| d.join(name));
    let questions = usage(
        args.questions
            .clone()
            .or_else(|| mock_path("questions.json"))
            .context("--questions is required without --mock"),
    )?;
    let annotations = args
        .annotations
        .clone()
        .or_else(|| mock_path("annotations.json").and_then(existing));
    let examples = usage(
        args.examples
            .clone()
            .or_else(|| mock_path("examples.json"))
            .context("--examples is required without --mock"),
    )?;

    let mut dataset = usage(load_dataset(&questions, annotations.as_deref()).map_err(Into::into))?;
    if let Some(limit) = args.limit {
        dataset.truncate(limit);
    }
    let index = usage(ExampleIndex::load(&examples).map_err(Into::into))?;

    let run_dir = usage(RunDir::create(&args.out).map_err(Into::into))?;
    let cache_dir = args
        .cache
        .clone()
        .or_else(|| cfg.cache_dir.clone())
        .unwrap_or_else(|| args.out.join("cache"));
    let cache = Arc::new(usage(ResponseCache::on_disk(&cache_dir).map_err(Into::into))?);

    let backends = match &args.mock {
        Some(dir) => {
            let fixtures = usage(Fixtures::load(&dir.join("fixtures.json")).map_err(Into::into))?;
            StageBackends::mock(Arc::new(fixtures), cache, cfg.max_in_flight)
        }
        None => usage(StageBackends::http(&cfg, cache).map_err(Into::into))?,
    };
    tracing::info!(
        questions = dataset.len(),
        examples = index.len(),
        ablation = cfg.ablation.label(),
        workers = args.workers,
        cache = %cache_dir.display(),
        "starting run"
    );

    let pipeline = Pipeline::new(cfg.clone(), backends, index);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    let results = runtime.block_on(pipeline.run_batch(&dataset, args.workers));
    let report = pipeline.report(&results);
    run_dir.write_run(&cfg, &report, &results, args.trace)?;
    run_dir.write_stats(&pipeline.backends().stats())?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    if !dataset.is_empty() && report.failed == dataset.len() {
        return Err(dka_core::Error::AllFailed(dataset.len()).into());
    }
    Ok(())
}

fn score(args: ScoreArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.max_missing) {
        return usage(Err(anyhow::anyhow!("--max-missing must be within [0, 1]")));
    }
    let predictions = usage(load_predictions(&args.predictions).map_err(Into::into))?;
    let gold = usage(load_annotations(&args.annotations).map_err(Into::into))?;
    let records = match score_predictions(&predictions, &gold, args.max_missing, args.strict) {
        Ok(records) => records,
        Err(err @ EvalError::Coverage { .. }) => return Err(err.into()),
        Err(err) => return usage(Err(err.into())),
    };
    let report = aggregate(
        &records,
        "n/a",
        json!({
            "predictions": path_str(&args.predictions),
            "annotations": path_str(&args.annotations),
            "strict_vqa_accuracy": args.strict,
        }),
    );
    let body = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, format!("{body}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{body}");
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

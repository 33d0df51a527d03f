//! `originality`: ingest, bucket, score, evaluate, fit-dist, baseline, report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! integrity error, 3 transport error.

mod commands;
mod config;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use originality::baselines::{Criterion, Method};
use originality::bucketer::CandidateLimit;
use originality::judge::PromptStrategy;
use originality::Error;

#[derive(Parser, Debug)]
#[command(
    name = "originality",
    version,
    about = "Idea bucketing and frequency-based originality scoring"
)]
struct Cli {
    /// Pipeline configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus table and write it in normalized form.
    Ingest(IngestArgs),
    /// Bucket ideas task by task with a judge.
    Bucket(BucketArgs),
    /// Score participants from bucket assignments.
    Score(ScoreArgs),
    /// Compare two labelings or two score tables.
    Evaluate(EvaluateArgs),
    /// Fit a discrete power law to bucket sizes.
    FitDist(FitDistArgs),
    /// Cluster idea embeddings with k-means or Ward linkage.
    Baseline(BaselineArgs),
    /// Full agreement report over several labelings.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Normalized corpus CSV (participant,task,order,idea).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum JudgeKind {
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmbedderKind {
    Http,
    Hashing,
}

#[derive(Args, Debug)]
struct BucketArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Tasks to bucket; all tasks when omitted.
    #[arg(long)]
    task: Vec<String>,
    /// Assignment JSON (an array, one entry per task).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "http")]
    judge: JudgeKind,
    /// Reference labeling the mock judge answers from.
    #[arg(long, required_if_eq("judge", "mock"))]
    oracle: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "http")]
    embedder: EmbedderKind,
    #[arg(long, default_value_t = 256)]
    hashing_dim: usize,
    /// Embedding cache file; overrides the config.
    #[arg(long)]
    embedding_cache: Option<PathBuf>,
    /// Candidate buckets shown to the judge: a number or `all`.
    #[arg(long)]
    k_c: Option<CandidateLimit>,
    #[arg(long)]
    strategy: Option<PromptStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_attempts: Option<u32>,
    /// JSON-lines audit log, appended to.
    #[arg(long)]
    audit: Option<PathBuf>,
    /// Directory for per-task checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    checkpoint_every: usize,
    /// Continue from checkpoints in --checkpoint-dir.
    #[arg(long, requires = "checkpoint_dir")]
    resume: bool,
    /// Tasks bucketed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Assignment JSON or reference CSV; repeatable.
    #[arg(long, required = true)]
    assignment: Vec<PathBuf>,
    /// Score table CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["labels_a", "scores_a"]))]
struct EvaluateArgs {
    #[arg(long, requires_all = ["labels_b", "corpus"])]
    labels_a: Option<PathBuf>,
    #[arg(long, requires = "labels_a")]
    labels_b: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, requires = "scores_b", conflicts_with = "labels_a")]
    scores_a: Option<PathBuf>,
    #[arg(long, requires = "scores_a")]
    scores_b: Option<PathBuf>,
    /// Compare raw sums instead of fluency-normalized totals.
    #[arg(long)]
    raw: bool,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["sizes", "assignment"]))]
struct FitDistArgs {
    /// Bucket sizes, one integer per line.
    #[arg(long)]
    sizes: Option<PathBuf>,
    /// Assignment JSON, or reference CSV together with --corpus.
    #[arg(long)]
    assignment: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Fix xmin instead of choosing it by KS distance.
    #[arg(long)]
    xmin: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmbeddingSource {
    Cache,
    Hashing,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    task: Vec<String>,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    criterion: Criterion,
    #[arg(long, default_value_t = 5)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed K instead of a scan.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "cache")]
    embeddings: EmbeddingSource,
    #[arg(long)]
    embedding_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    hashing_dim: usize,
    /// Labeling as assignment JSON.
    #[arg(long)]
    out: PathBuf,
    /// Model selection curves as JSON.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `NAME=PATH` of an assignment JSON or reference CSV; repeatable.
    #[arg(long, required = true, value_parser = inputs::named_path)]
    labels: Vec<(String, PathBuf)>,
    /// `NAME=PATH` of a score table; repeatable.
    #[arg(long, value_parser = inputs::named_path)]
    scores: Vec<(String, PathBuf)>,
    /// Participant-level measures table.
    #[arg(long)]
    measures: Option<PathBuf>,
    /// Measure columns to use; all non-participant columns by default.
    #[arg(long, value_delimiter = ',')]
    measure_cols: Vec<String>,
    /// Measures whose validity coefficient is read as Spearman.
    #[arg(long, value_delimiter = ',')]
    spearman_measures: Vec<String>,
    #[arg(long)]
    raw: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Transport(_) | Error::Interrupted { .. } => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn report_error(e: &Error) {
    eprintln!("error: {e}");
    if let Error::Coverage { keys, .. } = e {
        for k in keys.iter().take(10) {
            eprintln!("  {k}");
        }
        if keys.len() > 10 {
            eprintln!("  ... and {} more", keys.len() - 10);
        }
    }
    if let Error::Interrupted { .. } = e {
        eprintln!("rerun with --resume to continue from the checkpoint");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();

    let result = config::PipelineConfig::load(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Ingest(a) => commands::ingest(&config, a),
        Command::Bucket(a) => commands::bucket(config, a),
        Command::Score(a) => commands::score(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::FitDist(a) => commands::fit_dist(&config, a),
        Command::Baseline(a) => commands::baseline(&config, a),
        Command::Report(a) => commands::report(&config, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `ctxcomplete`: generate data, train, evaluate, complete and serve.
//!
//! Exit codes: 0 success, 1 usage, 2 data or input error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxcomplete_core::instance::InstanceError;
use ctxcomplete_core::train::TrainError;

#[derive(Debug, Parser)]
#[command(name = "ctxcomplete", version, about = "Context-conditioned query auto-completion")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scene/query corpus.
    GenSynthetic(GenArgs),
    /// Train the context-conditioned language model.
    TrainLm(TrainArgs),
    /// Train the instance-probability head.
    TrainInstances(TrainArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
    /// Complete a prefix under an image or noise context.
    Complete(CompleteArgs),
    /// Instance probabilities for a query.
    Instances(InstancesArgs),
    /// Perplexity, MRR and F1 on a held-out split.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    per_scene: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ContextArg {
    Image,
    Noise,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[arg(long)]
    out: PathBuf,
    /// Override the preset's iteration count.
    #[arg(long)]
    iterations: Option<u64>,
    /// Override the preset's (peak) learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training context for the language model.
    #[arg(long, value_enum, default_value_t = ContextArg::Image)]
    context: ContextArg,
    /// Seed of the train/val/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Loss-curve CSV. Defaults to `<out>.loss.csv`.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Continue from a checkpoint written by the same subcommand.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also save the checkpoint every N iterations.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Save and exit at this iteration; `--resume` continues the same schedule.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Drop unknown instance classes instead of failing.
    #[arg(long)]
    skip_unknown_classes: bool,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct CompleteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "noise", required_unless_present = "noise")]
    image_id: Option<String>,
    /// Condition on a standard-normal context drawn from `--seed`.
    #[arg(long)]
    noise: bool,
    #[arg(long, default_value = "", required_unless_present = "interactive")]
    prefix: String,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Read one prefix per line from stdin and complete each.
    #[arg(long)]
    interactive: bool,
    /// Print the response body the HTTP service would return.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct InstancesArgs {
    /// Instance-head checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instances_ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval_report.json")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Evaluate MRR on at most this many queries.
    #[arg(long)]
    mrr_limit: Option<usize>,
    #[arg(long)]
    skip_unknown_classes: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instances_ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Allowed CORS origin. Any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
}

/// A failed numeric check: gradient mismatch or diverged training.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.is::<NumericFailure>()
            || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteLoss(_)))
            || matches!(e.downcast_ref::<InstanceError>(), Some(InstanceError::NonFiniteLoss))
    });
    if numeric {
        3
    } else {
        2
    }
}

fn init_logging() {
    let filter = std::env::var("CTXCOMPLETE_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&filter)
        .format_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging();
    let seed = cli.seed;
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a, seed),
        Command::TrainLm(a) => commands::train_lm(&a, seed),
        Command::TrainInstances(a) => commands::train_instances(&a, seed),
        Command::GradCheck(a) => commands::grad_check(&a, seed),
        Command::Complete(a) => commands::complete(&a, seed),
        Command::Instances(a) => commands::instances(&a),
        Command::Evaluate(a) => commands::evaluate(&a, seed),
        Command::Serve(a) => commands::serve(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

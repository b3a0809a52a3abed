mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rdcd", version, about = "Compact copy-detection descriptors by relational distillation")]
struct Cli {
    /// TOML run configuration; omitted keys take built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the corpus and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation and loss kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic copy corpus into `<run>/corpus`.
    GenData,
    /// Pretrain the teacher into `<run>/teacher`.
    TrainTeacher,
    /// Distill a student from the teacher.
    Distill(DistillArgs),
    /// Search, score and write metrics for a trained encoder.
    Evaluate(EvalArgs),
    /// Write the covariance spectrum and similarity gaps for a trained encoder.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoHn,
    NoRel,
    NoCon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossMode {
    Hardest,
    #[value(name = "literal-eq7")]
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RelArg {
    Rsd,
    Fkd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Projector,
    Matcher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetArg {
    References,
    Queries,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Zero one loss weight; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Hard-negative loss form.
    #[arg(long, value_enum)]
    loss_mode: Option<LossMode>,
    /// Relational term: similarity distillation or feature regression.
    #[arg(long, value_enum)]
    rel: Option<RelArg>,
    /// Output subdirectory of the run directory.
    #[arg(long, default_value = "student")]
    name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run subdirectory holding `checkpoint.json`.
    #[arg(long, default_value = "student")]
    stage: String,
    /// Explicit checkpoint path; overrides `--stage` lookup.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Whiten descriptors to this dimension before search.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Also report score-normalized micro AP.
    #[arg(long)]
    score_normalize: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, default_value = "student")]
    stage: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Descriptor set whose covariance spectrum is reported.
    #[arg(long, value_enum, default_value = "references")]
    set: SetArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RDCD_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = config::load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let ctx = commands::Context { cfg, force: cli.force };
    match cli.command {
        Command::GenData => commands::gen_data(ctx),
        Command::TrainTeacher => commands::train_teacher(ctx),
        Command::Distill(a) => commands::distill(ctx, &a),
        Command::Evaluate(a) => commands::evaluate(ctx, &a),
        Command::Diagnose(a) => commands::diagnose(ctx, &a),
    }
}

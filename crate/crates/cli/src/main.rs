use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Relation-aware customized image generation at desk scale.
#[derive(Debug, Parser)]
#[command(name = "relgen", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration layering shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config file layered over the defaults. A saved `run_config.json`
    /// works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or ingest a triplet dataset.
    #[command(subcommand)]
    Data(DataCommand),
    /// Fine-tune relation adapters on a triplet manifest.
    Train(TrainArgs),
    /// Sample images from request files.
    Generate(GenerateArgs),
    /// Score generated images against a benchmark manifest.
    Evaluate(EvaluateArgs),
    /// Distill the local encoder against the stub teacher.
    Distill(DistillArgs),
    /// RelationBench helpers.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Dump internal representations.
    #[command(subcommand)]
    Inspect(InspectCommand),
    /// Train and evaluate over a grid of settings.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Generate triplets with a client and write `manifest.jsonl`.
    Build(DataBuildArgs),
    /// Turn annotated staged triplets into `manifest.jsonl`.
    Ingest(DataIngestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClientKind {
    Mock,
    External,
}

#[derive(Debug, Args)]
pub struct DataBuildArgs {
    /// Relations file; the packaged relation list when omitted.
    #[arg(long)]
    pub relations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    pub client: ClientKind,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DataIngestArgs {
    /// Directory written by `data build`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Triplet manifest; the packaged synthetic set when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Distilled local encoder archive.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Request file: one request or `{"requests": [...]}`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Adapter archive, overriding any `adapter_archive` in the requests.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Base seed; request `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Stub,
    External,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Benchmark manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `{case id}.png`.
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    pub backend: BackendChoice,
    /// Joint image-text lookup table for `--backend external`.
    #[arg(long, env = "RELGEN_JOINT_TABLE")]
    pub joint_table: Option<PathBuf>,
    /// Vision-only lookup table for `--backend external`.
    #[arg(long, env = "RELGEN_VISION_TABLE")]
    pub vision_table: Option<PathBuf>,
    /// Label of the report table row.
    #[arg(long, default_value = "model")]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Write a benchmark manifest and reference images.
    Build(BenchBuildArgs),
    /// Generate every case of a manifest and score the outputs.
    Run(BenchRunArgs),
}

#[derive(Debug, Args)]
pub struct BenchBuildArgs {
    /// Number of cases; `bench.cases` from the config when omitted.
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchRunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Subcommand)]
enum InspectCommand {
    /// Local tokens, dense features and their 2-component PCA as JSON.
    LocalTokens(InspectArgs),
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `name=v1,v2,...` with name one of lambda, num_local_tokens,
    /// injection_method, ablation_mode. Repeatable.
    #[arg(long = "axis", value_name = "NAME=VALUES", required = true)]
    pub axes: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// A bad argument found after parsing. Exits with the validation code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_VALIDATION;
    }
    match err.downcast_ref::<relgen_core::Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Data(DataCommand::Build(a)) => commands::data_build(a),
        Command::Data(DataCommand::Ingest(a)) => commands::data_ingest(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Distill(a) => commands::distill(a),
        Command::Bench(BenchCommand::Build(a)) => commands::bench_build(a),
        Command::Bench(BenchCommand::Run(a)) => commands::bench_run(a),
        Command::Inspect(InspectCommand::LocalTokens(a)) => commands::inspect_local_tokens(a),
        Command::Ablate(a) => commands::ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

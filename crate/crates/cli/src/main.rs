mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stagerank", version, about = "Train, index, rerank, evaluate, profile and serve multi-stage retrieval pipelines")]
pub struct Cli {
    /// JSON run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and the resolved-config snapshot.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Allow overwriting existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate or check BEIR-format datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Build a vocabulary from datasets.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Train a reranker or an embedder.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Mine hard negatives with a teacher embedder.
    Mine(ModelArgs),
    /// Embed a corpus and write a vector index.
    Index(ModelArgs),
    /// Run one query through the pipeline.
    Query(QueryArgs),
    /// Score run files against qrels.
    Evaluate(EvaluateArgs),
    /// Evaluate every embedder alone and with every reranker.
    Benchmark(BenchmarkArgs),
    /// Reranker ablation grid on synthetic data.
    Ablate,
    /// Measure query latency, indexing throughput and rerank latency.
    Profile(ProfileArgs),
    /// Serve embedding and ranking endpoints.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Write a seeded synthetic dataset to --out.
    Synth,
    /// Validate a dataset directory and print its statistics.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum VocabCmd {
    Build {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    Reranker {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        mined: PathBuf,
        /// Start from this reranker checkpoint (pruned to model.prune_k when set).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    Embedder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        mined: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Local embedder checkpoint; the config's remote embedder is used when omitted.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub reranker: Option<PathBuf>,
    #[arg(long)]
    pub text: String,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub embedder: Vec<PathBuf>,
    #[arg(long)]
    pub reranker: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub embedder: PathBuf,
    /// Single-stage alternative to compare against (embedder + reranker).
    #[arg(long)]
    pub large_embedder: Option<PathBuf>,
    #[arg(long)]
    pub reranker: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let body = serde_json::json!({ "error": format!("{:#}", failure.error), "kind": failure.kind.as_str() });
            eprintln!("{body}");
            ExitCode::from(failure.kind.code())
        }
    }
}

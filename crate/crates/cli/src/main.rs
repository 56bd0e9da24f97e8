use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "hybrank", version, about = "Hybrid sparse/dense collaborative passage reranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25 term index of a JSON-lines corpus.
    Index(IndexArgs),
    /// Build per-query similarity feature caches for an initial run.
    Features(FeatureArgs),
    /// Train a reranker on cached features.
    Train(TrainArgs),
    /// Rerank an initial run with a trained checkpoint.
    Rerank(RerankArgs),
    /// Evaluate a run against qrels and print a JSON report.
    Eval(EvalArgs),
    /// Convert text embeddings (`id v1 v2 ...` per line) to the binary format.
    EmbedConvert(EmbedConvertArgs),
    /// Write a seeded synthetic benchmark in the pipeline's file formats.
    Synth(SynthArgs),
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn existing_dir(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_dir() {
        Ok(p)
    } else {
        Err(format!("no such directory: {s}"))
    }
}

#[derive(Args)]
pub struct IndexArgs {
    /// Corpus in JSON lines with `id`, `text` and optional `title`.
    #[arg(long, value_parser = existing_file)]
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.4)]
    pub b: f64,
    /// Overwrite an existing index file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Top,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Sparse,
    Dense,
    Hybrid,
}

#[derive(Args)]
pub struct FeatureArgs {
    #[arg(long, value_parser = existing_file)]
    pub run: PathBuf,
    /// Queries as `qid<TAB>text` lines.
    #[arg(long, value_parser = existing_file)]
    pub queries: PathBuf,
    /// Term index; required for sparse and hybrid modes.
    #[arg(long, value_parser = existing_file)]
    pub index: Option<PathBuf>,
    /// Binary embedding file; required for dense and hybrid modes.
    #[arg(long, value_parser = existing_file, requires = "ids")]
    pub vectors: Option<PathBuf>,
    /// Embedding ids, one per line in row order.
    #[arg(long, value_parser = existing_file, requires = "vectors")]
    pub ids: Option<PathBuf>,
    /// Directory receiving one `.fea` file per query.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Passages kept per query from the run.
    #[arg(long, default_value_t = 100)]
    pub depth: usize,
    /// Anchor count, or `all` for the whole list.
    #[arg(long, default_value = "all")]
    pub anchors: String,
    #[arg(long, value_enum, default_value = "top")]
    pub anchor_strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "hybrid")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 100.0)]
    pub t_sparse: f64,
    #[arg(long, default_value_t = 10.0)]
    pub t_dense: f64,
    /// Seed for random anchors.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use only query-passage similarities instead of anchor columns.
    #[arg(long)]
    pub no_collab: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Feature caches of the training queries.
    #[arg(long, value_parser = existing_dir)]
    pub features: PathBuf,
    #[arg(long, value_parser = existing_file)]
    pub qrels: PathBuf,
    /// Receives per-epoch checkpoints, `best.ckpt`, `final.ckpt` and `train.log`.
    #[arg(long, short)]
    pub output: PathBuf,
    /// `key = value` lines; flags given on the command line take precedence.
    #[arg(long, value_parser = existing_file)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = existing_dir, requires = "dev_qrels")]
    pub dev_features: Option<PathBuf>,
    #[arg(long, value_parser = existing_file, requires = "dev_features")]
    pub dev_qrels: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_queries: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub inner: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers_inter: Option<usize>,
    #[arg(long)]
    pub layers_aggr: Option<usize>,
    #[arg(long)]
    pub max_rank: Option<usize>,
    /// Skip the anchor-wise interaction encoder.
    #[arg(long)]
    pub no_interaction: bool,
    /// Represent the query by a learned token instead of its similarity row.
    #[arg(long)]
    pub no_query_row: bool,
    /// Drop rank position embeddings.
    #[arg(long)]
    pub no_positions: bool,
}

#[derive(Args)]
pub struct RerankArgs {
    #[arg(long, value_parser = existing_file)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = existing_dir)]
    pub features: PathBuf,
    #[arg(long, value_parser = existing_file)]
    pub run: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Passages kept per query from the run; must match the feature build.
    #[arg(long, default_value_t = 100)]
    pub depth: usize,
    #[arg(long, default_value = "hybrank")]
    pub tag: String,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_parser = existing_file)]
    pub run: PathBuf,
    #[arg(long, value_parser = existing_file)]
    pub qrels: PathBuf,
    /// Comma-separated, e.g. `r@1,r@5,mrr@10,ndcg@10`.
    #[arg(long, default_value = "r@1,r@5,r@10,r@20,r@50,mrr@10,ndcg@10")]
    pub metrics: String,
}

#[derive(Args)]
pub struct EmbedConvertArgs {
    #[arg(long, value_parser = existing_file)]
    pub input: PathBuf,
    #[arg(long)]
    pub vectors: PathBuf,
    #[arg(long)]
    pub ids: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub topics: usize,
    #[arg(long, default_value_t = 500)]
    pub train_queries: usize,
    #[arg(long, default_value_t = 100)]
    pub test_queries: usize,
    #[arg(long, default_value_t = 40)]
    pub list_len: usize,
    #[arg(long, default_value_t = 3000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(a) => commands::index(a),
        Command::Features(a) => commands::features(a),
        Command::Train(a) => commands::train(a),
        Command::Rerank(a) => commands::rerank(a),
        Command::Eval(a) => commands::eval(a),
        Command::EmbedConvert(a) => commands::embed_convert(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

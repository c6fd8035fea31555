use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Context-aware chunk embeddings: chunking, training, indexing and
/// evaluation pipelines.
#[derive(Debug, Parser)]
#[command(name = "ctxembed", version)]
struct Cli {
    /// Worker threads; 0 picks one per core, 1 gives deterministic runs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// TOML file with [encoder], [train], [synth], [chunker], [index],
    /// [eval] and [sweep] sections. Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split documents into chunks.
    Chunk(ChunkArgs),
    /// Generate a synthetic corpus with sabotaged chunks.
    Synth(SynthArgs),
    /// Train an encoder with the in-sequence/in-batch contrastive loss.
    Train(TrainArgs),
    /// Build a chunk index.
    Index(IndexArgs),
    /// Search an index.
    Search(SearchArgs),
    /// Evaluate an index on a queries file.
    Eval(EvalArgs),
    /// Run a chunk-size, corpus-size or loss-weight sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct ChunkArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_chars: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n_docs: Option<usize>,
    /// Sabotage rate: probability that a later chunk loses the entity name.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chunks_per_doc: Option<usize>,
    #[arg(long)]
    facts_per_chunk: Option<usize>,
    #[arg(long)]
    queries_per_chunk: Option<usize>,
    #[arg(long)]
    filler_per_chunk: Option<usize>,
    #[arg(long)]
    first_entity_id: Option<usize>,
    /// Output docs and queries JSONL paths.
    #[arg(long, num_args = 2, value_names = ["DOCS", "QUERIES"], required = true)]
    out: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PoolingArg {
    Independent,
    LateChunk,
    LateInteraction,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Chunked docs JSONL.
    #[arg(long)]
    corpus: PathBuf,
    /// Queries JSONL.
    #[arg(long)]
    queries: PathBuf,
    /// Output directory for the checkpoint, loss log and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_seq: Option<f64>,
    #[arg(long)]
    docs_per_batch: Option<usize>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for parameter initialisation.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    Independent,
    LateChunk,
    LateInteraction,
    SlidingWindow,
    Bm25,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Encoder checkpoint; not needed for bm25.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::LateChunk)]
    mode: ModeArg,
    #[arg(long)]
    window_tokens: Option<usize>,
    #[arg(long)]
    overlap_chunks: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    query: String,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Output directory for summary.csv and per_query.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Chunk,
    Corpus,
    Lambda,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    /// Docs JSONL: the evaluation corpus, or the training corpus for `lambda`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// `NAME=MODE[:CHECKPOINT]`, repeatable (chunk and corpus sweeps).
    #[arg(long = "retriever")]
    retrievers: Vec<String>,
    /// `NAME=DOCS,QUERIES`, repeatable (lambda sweep).
    #[arg(long = "task")]
    tasks: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    doc_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}

/// Joins the error chain, skipping causes a message already ends with.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let cause = cause.to_string();
        if !msg.ends_with(&cause) {
            msg.push_str(": ");
            msg.push_str(&cause);
        }
    }
    msg
}

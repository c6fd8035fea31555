use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use ctxembed::chunking::recursive_split;
use ctxembed::corpus::{load_corpus, load_documents, load_queries, load_raw_documents, save_corpus, save_documents, Document};
use ctxembed::encoder::Encoder;
use ctxembed::evalbench::{
    chunk_size_sweep, corpus_scaling_sweep, evaluate, lambda_sweep, series_values, std_dev, sweep_csv, NamedRetriever,
    Retriever,
};
use ctxembed::persist::{load_checkpoint, save_checkpoint};
use ctxembed::retrieval::{build_bm25_index, build_index, load_index, save_index, search, Bm25Params, IndexMode};
use ctxembed::synthgen::generate;
use ctxembed::trainer::{train, write_loss_log, TrainPooling};
use serde::Serialize;
use serde_json::json;

use crate::config::{echo, FileConfig, IndexSettings};
use crate::{
    ChunkArgs, Cli, Command, EvalArgs, IndexArgs, ModeArg, PoolingArg, SearchArgs, SweepArgs, SweepKind, SynthArgs,
    TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let summary = match cli.command {
        Command::Chunk(a) => chunk(cfg, a)?,
        Command::Synth(a) => synth(cfg, a)?,
        Command::Train(a) => train_cmd(cfg, a)?,
        Command::Index(a) => index(cfg, a)?,
        Command::Search(a) => search_cmd(cfg, a)?,
        Command::Eval(a) => eval(cfg, a)?,
        Command::Sweep(a) => sweep(cfg, a)?,
    };
    println!("{summary}");
    Ok(())
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("cli: configuring the thread pool")
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: usize) -> Result<()> {
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cli: creating {}", dir.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cli: writing {}", path.display()))
}

fn chunk(mut cfg: FileConfig, a: ChunkArgs) -> Result<serde_json::Value> {
    if let Some(m) = a.max_chars {
        cfg.chunker.max_chars = m;
    }
    cfg.chunker.validate()?;
    echo("chunk", &json!({ "chunker": cfg.chunker }))?;
    let raw = load_raw_documents(&a.input)?;
    let docs: Vec<Document> = raw
        .into_iter()
        .map(|r| {
            let spans = recursive_split(&r.text, &cfg.chunker);
            ensure!(!spans.is_empty(), "chunking: document `{}` is empty", r.doc_id);
            Ok(Document::from_spans(r.doc_id, r.text, &spans))
        })
        .collect::<Result<_>>()?;
    save_documents(&a.out, &docs)?;
    let chunks: usize = docs.iter().map(|d| d.chunks.len()).sum();
    Ok(json!({ "command": "chunk", "documents": docs.len(), "chunks": chunks, "out": a.out }))
}

fn synth(mut cfg: FileConfig, a: SynthArgs) -> Result<serde_json::Value> {
    let s = &mut cfg.synth;
    if let Some(v) = a.n_docs {
        s.n_docs = v;
    }
    if let Some(v) = a.p {
        s.sabotage_rate = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.chunks_per_doc {
        s.chunks_per_doc = v;
    }
    if let Some(v) = a.facts_per_chunk {
        s.facts_per_chunk = v;
    }
    if let Some(v) = a.queries_per_chunk {
        s.queries_per_chunk = v;
    }
    if let Some(v) = a.filler_per_chunk {
        s.filler_per_chunk = v;
    }
    if let Some(v) = a.first_entity_id {
        s.first_entity_id = v;
    }
    echo("synth", &json!({ "synth": cfg.synth }))?;
    let corpus = generate(&cfg.synth)?;
    save_corpus(&corpus, &a.out[0], &a.out[1])?;
    Ok(json!({
        "command": "synth",
        "documents": corpus.documents.len(),
        "chunks": corpus.num_chunks(),
        "queries": corpus.queries.len(),
        "out": a.out,
    }))
}

fn pooling(p: PoolingArg) -> TrainPooling {
    match p {
        PoolingArg::Independent => TrainPooling::Independent,
        PoolingArg::LateChunk => TrainPooling::LateChunk,
        PoolingArg::LateInteraction => TrainPooling::LateInteraction,
    }
}

fn train_cmd(mut cfg: FileConfig, a: TrainArgs) -> Result<serde_json::Value> {
    let t = &mut cfg.train;
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lambda_seq {
        t.loss.lambda_seq = v;
    }
    if let Some(v) = a.docs_per_batch {
        t.docs_per_batch = v;
    }
    if let Some(v) = a.pooling {
        t.pooling = pooling(v);
        t.loss.scorer = t.pooling.scorer();
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    let e = &mut cfg.encoder;
    if let Some(v) = a.init_seed {
        e.seed = v;
    }
    if let Some(v) = a.dim {
        e.dim = v;
    }
    if let Some(v) = a.heads {
        e.heads = v;
    }
    if let Some(v) = a.layers {
        e.layers = v;
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        encoder: &'a ctxembed::encoder::EncoderConfig,
        train: &'a ctxembed::trainer::TrainConfig,
    }
    let resolved = Resolved {
        encoder: &cfg.encoder,
        train: &cfg.train,
    };
    echo("train", &resolved)?;
    cfg.train.validate()?;
    let corpus = load_corpus(&a.corpus, &a.queries)?;
    let encoder = Encoder::new(cfg.encoder.clone())?;
    let out = train(&corpus, encoder, &cfg.train)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("encoder.ckpt");
    save_checkpoint(&ckpt, &out.encoder)?;
    write_loss_log(&a.out.join("loss.csv"), &out.log)?;
    write(&a.out.join("config.toml"), &toml::to_string(&resolved)?)?;
    Ok(json!({
        "command": "train",
        "steps": out.log.len(),
        "docs_used": out.docs_used,
        "final_loss": out.log.last().map(|r| r.loss),
        "checksum": out.encoder.params.checksum(),
        "checkpoint": ckpt,
    }))
}

fn index_mode(mode: ModeArg, s: &IndexSettings) -> Option<IndexMode> {
    match mode {
        ModeArg::Independent => Some(IndexMode::Independent),
        ModeArg::LateChunk => Some(IndexMode::LateChunk),
        ModeArg::LateInteraction => Some(IndexMode::LateInteraction),
        ModeArg::SlidingWindow => Some(IndexMode::SlidingWindow {
            window_tokens: s.window_tokens,
            overlap_chunks: s.overlap_chunks,
        }),
        ModeArg::Bm25 => None,
    }
}

fn load_encoder(path: Option<&PathBuf>) -> Result<Option<Encoder>> {
    path.map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn retriever(mode: ModeArg, checkpoint: Option<&PathBuf>, cfg: &FileConfig) -> Result<Retriever> {
    Ok(match index_mode(mode, &cfg.index) {
        None => Retriever::Bm25 {
            tokenizer: cfg.encoder_tokenizer(),
            params: Bm25Params::default(),
        },
        Some(mode) => {
            let Some(encoder) = load_encoder(checkpoint)? else {
                bail!("cli: mode {} needs --checkpoint", mode.name());
            };
            Retriever::Dense { encoder, mode }
        }
    })
}

fn index(mut cfg: FileConfig, a: IndexArgs) -> Result<serde_json::Value> {
    if let Some(v) = a.window_tokens {
        cfg.index.window_tokens = v;
    }
    if let Some(v) = a.overlap_chunks {
        cfg.index.overlap_chunks = v;
    }
    let mode = index_mode(a.mode, &cfg.index);
    echo(
        "index",
        &json!({ "index": { "mode": mode.map_or("bm25", IndexMode::name), "settings": cfg.index } }),
    )?;
    let corpus = load_documents(&a.corpus)?;
    let built = match mode {
        None => {
            let tokenizer = match load_encoder(a.checkpoint.as_ref())? {
                Some(enc) => enc.tokenizer(),
                None => cfg.encoder_tokenizer(),
            };
            build_bm25_index(&corpus, tokenizer, Bm25Params::default())
        }
        Some(mode) => {
            let Some(encoder) = load_encoder(a.checkpoint.as_ref())? else {
                bail!("cli: mode {} needs --checkpoint", mode.name());
            };
            build_index(&corpus, &encoder, mode)?
        }
    };
    save_index(&a.out, &built)?;
    Ok(json!({
        "command": "index",
        "kind": built.kind(),
        "entries": built.len(),
        "dim": built.dim(),
        "out": a.out,
    }))
}

fn search_cmd(mut cfg: FileConfig, a: SearchArgs) -> Result<serde_json::Value> {
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    echo("search", &json!({ "eval": cfg.eval }))?;
    let idx = load_index(&a.index)?;
    let encoder = load_encoder(a.checkpoint.as_ref())?;
    let result = search(&idx, &a.query, encoder.as_ref(), cfg.eval.k)?;
    Ok(json!({ "command": "search", "query": a.query, "hits": result.hits }))
}

fn eval(mut cfg: FileConfig, a: EvalArgs) -> Result<serde_json::Value> {
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    echo("eval", &json!({ "eval": cfg.eval }))?;
    let idx = load_index(&a.index)?;
    let encoder = load_encoder(a.checkpoint.as_ref())?;
    let queries = load_queries(&a.queries)?;
    let report = evaluate(&idx, &queries, encoder.as_ref(), cfg.eval.k)?;
    create_dir(&a.out)?;
    write(&a.out.join("summary.csv"), &report.summary_csv())?;
    write(&a.out.join("per_query.csv"), &report.per_query_csv())?;
    Ok(json!({
        "command": "eval",
        "mode": report.mode,
        "k": report.k,
        "ndcg": report.mean_ndcg,
        "recall": report.mean_recall,
        "queries": report.per_query.len(),
        "excluded": report.excluded.len(),
        "out": a.out,
    }))
}

/// Parses `NAME=MODE[:CHECKPOINT]`.
fn parse_retriever(spec: &str, cfg: &FileConfig) -> Result<NamedRetriever> {
    let (name, rest) = spec
        .split_once('=')
        .with_context(|| format!("cli: retriever `{spec}` is not NAME=MODE[:CHECKPOINT]"))?;
    let (mode, ckpt) = match rest.split_once(':') {
        Some((m, c)) => (m, Some(PathBuf::from(c))),
        None => (rest, None),
    };
    let mode = ModeArg::from_str(mode, false).map_err(|e| anyhow::anyhow!("cli: retriever `{spec}`: {e}"))?;
    Ok(NamedRetriever {
        name: name.to_string(),
        retriever: retriever(mode, ckpt.as_ref(), cfg)?,
    })
}

/// Parses `NAME=DOCS,QUERIES`.
fn parse_task(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let parsed = spec
        .split_once('=')
        .and_then(|(name, paths)| paths.split_once(',').map(|(d, q)| (name, d, q)));
    let (name, docs, queries) = parsed.with_context(|| format!("cli: task `{spec}` is not NAME=DOCS,QUERIES"))?;
    Ok((name.to_string(), docs.into(), queries.into()))
}

fn sweep(mut cfg: FileConfig, a: SweepArgs) -> Result<serde_json::Value> {
    if let Some(v) = a.sizes {
        cfg.sweep.sizes = v;
    }
    if let Some(v) = a.doc_counts {
        cfg.sweep.doc_counts = v;
    }
    if let Some(v) = a.lambdas {
        cfg.sweep.lambdas = v;
    }
    if let Some(v) = a.seed {
        cfg.sweep.seed = v;
    }
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    let k = cfg.eval.k;
    let corpus = load_corpus(&a.corpus, &a.queries)?;
    create_dir(&a.out)?;
    let mut summary = json!({ "command": "sweep" });
    let (csv, name) = match a.kind {
        SweepKind::Chunk | SweepKind::Corpus => {
            ensure!(!a.retrievers.is_empty(), "cli: sweep needs at least one --retriever");
            let retrievers = a
                .retrievers
                .iter()
                .map(|s| parse_retriever(s, &cfg))
                .collect::<Result<Vec<_>>>()?;
            if a.kind == SweepKind::Chunk {
                echo("sweep", &json!({ "kind": "chunk", "sizes": cfg.sweep.sizes, "k": k, "retrievers": a.retrievers }))?;
                let rows = chunk_size_sweep(&corpus, &retrievers, &cfg.sweep.sizes, k)?;
                let spread: BTreeMap<&str, f64> = retrievers
                    .iter()
                    .map(|r| (r.name.as_str(), std_dev(&series_values(&rows, &r.name))))
                    .collect();
                summary["std_ndcg"] = json!(spread);
                (sweep_csv("size", "mode", &rows), "sweep_chunk.csv")
            } else {
                echo(
                    "sweep",
                    &json!({ "kind": "corpus", "doc_counts": cfg.sweep.doc_counts, "seed": cfg.sweep.seed, "k": k, "retrievers": a.retrievers }),
                )?;
                let (rows, samples) =
                    corpus_scaling_sweep(&corpus, &retrievers, &cfg.sweep.doc_counts, k, cfg.sweep.seed)?;
                let samples: BTreeMap<String, _> =
                    cfg.sweep.doc_counts.iter().map(|n| n.to_string()).zip(samples).collect();
                write(&a.out.join("samples.json"), &serde_json::to_string_pretty(&samples)?)?;
                (sweep_csv("n_docs", "mode", &rows), "sweep_corpus.csv")
            }
        }
        SweepKind::Lambda => {
            ensure!(!a.tasks.is_empty(), "cli: lambda sweep needs at least one --task");
            #[derive(Serialize)]
            struct Resolved<'a> {
                kind: &'a str,
                lambdas: &'a [f64],
                k: usize,
                encoder: &'a ctxembed::encoder::EncoderConfig,
                train: &'a ctxembed::trainer::TrainConfig,
            }
            echo(
                "sweep",
                &Resolved {
                    kind: "lambda",
                    lambdas: &cfg.sweep.lambdas,
                    k,
                    encoder: &cfg.encoder,
                    train: &cfg.train,
                },
            )?;
            let tasks = a
                .tasks
                .iter()
                .map(|s| {
                    let (name, d, q) = parse_task(s)?;
                    Ok((name, load_corpus(&d, &q)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = lambda_sweep(&corpus, &tasks, &cfg.sweep.lambdas, &cfg.encoder, &cfg.train, k)?;
            (sweep_csv("lambda", "task", &rows), "sweep_lambda.csv")
        }
    };
    let path = a.out.join(name);
    write(&path, &csv)?;
    summary["rows"] = json!(csv.lines().count() - 1);
    summary["out"] = json!(path);
    Ok(summary)
}

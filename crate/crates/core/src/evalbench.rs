//! Retrieval metrics and the sweep harnesses (chunk size, corpus size and
//! in-sequence weight).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chunking::subsplit_corpus;
use crate::corpus::{ChunkKey, Corpus, Query};
use crate::encoder::{Encoder, EncoderConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::par;
use crate::retrieval::{build_bm25_index, build_index, Bm25Params, ChunkIndex, IndexMode};
use crate::trainer::{train, TrainConfig, TrainPooling};

/// Binary-gain nDCG with a `1 / log2(rank + 1)` discount; the ideal ranking
/// places `min(|gold|, k)` hits first.
pub fn ndcg_at_k(ranked: &[ChunkKey], gold: &BTreeSet<ChunkKey>, k: usize) -> f64 {
    if gold.is_empty() || k == 0 {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, key)| gold.contains(key))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=gold.len().min(k)).map(discount).sum();
    dcg / idcg
}

/// Fraction of gold chunks within the top `k`.
pub fn recall_at_k(ranked: &[ChunkKey], gold: &BTreeSet<ChunkKey>, k: usize) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|key| gold.contains(key)).count();
    hits as f64 / gold.len() as f64
}

/// 1-based rank of the first gold chunk, if any was retrieved.
pub fn first_gold_rank(ranked: &[ChunkKey], gold: &BTreeSet<ChunkKey>) -> Option<usize> {
    ranked.iter().position(|key| gold.contains(key)).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub first_gold_rank: Option<usize>,
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub k: usize,
    pub seeds: BTreeMap<String, u64>,
    pub mean_ndcg: f64,
    pub mean_recall: f64,
    /// Queries whose gold chunks are not all in the index.
    pub excluded: Vec<String>,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    /// `query_id,first_gold_rank,ndcg,recall`; missing ranks are empty.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query_id,first_gold_rank,ndcg,recall\n");
        for q in &self.per_query {
            let rank = q.first_gold_rank.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{rank},{:.6},{:.6}", q.query_id, q.ndcg, q.recall);
        }
        out
    }

    /// `mode,k,queries,excluded,ndcg,recall`.
    pub fn summary_csv(&self) -> String {
        format!(
            "mode,k,queries,excluded,ndcg,recall\n{},{},{},{},{:.6},{:.6}\n",
            self.mode,
            self.k,
            self.per_query.len(),
            self.excluded.len(),
            self.mean_ndcg,
            self.mean_recall
        )
    }
}

fn mode_label(index: &ChunkIndex) -> String {
    index.mode.map_or_else(|| "bm25".to_string(), |m| m.name().to_string())
}

/// Searches every query and averages the metrics. Queries are scored in
/// parallel; queries with gold chunks outside the index are excluded and
/// listed.
pub fn evaluate(index: &ChunkIndex, queries: &[Query], encoder: Option<&Encoder>, k: usize) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    if let Some(enc) = encoder {
        index.check_encoder(enc)?;
    }
    let (kept, dropped): (Vec<&Query>, Vec<&Query>) =
        queries.iter().partition(|q| q.gold.iter().all(|g| index.contains(g)));
    if !dropped.is_empty() {
        log::warn!("{} queries reference chunks absent from the index", dropped.len());
    }
    if kept.is_empty() {
        return Err(Error::Eval("no query has its gold chunks in the index".into()));
    }
    let per_query = par::try_map(&kept, |q| {
        let rep = index.represent_query(&q.text, encoder)?;
        let ranked = index.search_rep(&rep, k)?.keys();
        Ok::<_, Error>(QueryOutcome {
            query_id: q.query_id.clone(),
            first_gold_rank: first_gold_rank(&ranked, &q.gold),
            ndcg: ndcg_at_k(&ranked, &q.gold, k),
            recall: recall_at_k(&ranked, &q.gold, k),
        })
    })?;
    let n = per_query.len() as f64;
    Ok(EvalReport {
        mode: mode_label(index),
        k,
        seeds: BTreeMap::new(),
        mean_ndcg: per_query.iter().map(|q| q.ndcg).sum::<f64>() / n,
        mean_recall: per_query.iter().map(|q| q.recall).sum::<f64>() / n,
        excluded: dropped.into_iter().map(|q| q.query_id.clone()).collect(),
        per_query,
    })
}

/// Something that can index a corpus and answer its queries.
#[derive(Debug, Clone)]
pub enum Retriever {
    Dense { encoder: Encoder, mode: IndexMode },
    Bm25 { tokenizer: Tokenizer, params: Bm25Params },
}

impl Retriever {
    pub fn build(&self, corpus: &Corpus) -> Result<ChunkIndex> {
        match self {
            Retriever::Dense { encoder, mode } => build_index(corpus, encoder, *mode),
            Retriever::Bm25 { tokenizer, params } => Ok(build_bm25_index(corpus, *tokenizer, *params)),
        }
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match self {
            Retriever::Dense { encoder, .. } => Some(encoder),
            Retriever::Bm25 { .. } => None,
        }
    }

    pub fn evaluate(&self, corpus: &Corpus, k: usize) -> Result<EvalReport> {
        let index = self.build(corpus)?;
        evaluate(&index, &corpus.queries, self.encoder(), k)
    }
}

/// A retriever with the label used in sweep output.
#[derive(Debug, Clone)]
pub struct NamedRetriever {
    pub name: String,
    pub retriever: Retriever,
}

/// One sweep measurement: a series (retrieval mode or task) at a point
/// (chunk size, corpus size or weight).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: String,
    pub series: String,
    pub ndcg: f64,
    pub recall: f64,
    pub queries: usize,
}

/// CSV with header `<point_name>,<series_name>,ndcg,recall,queries`.
pub fn sweep_csv(point_name: &str, series_name: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{point_name},{series_name},ndcg,recall,queries\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{}", r.point, r.series, r.ndcg, r.recall, r.queries);
    }
    out
}

fn row(point: String, series: &str, report: &EvalReport) -> SweepRow {
    SweepRow {
        point,
        series: series.to_string(),
        ndcg: report.mean_ndcg,
        recall: report.mean_recall,
        queries: report.per_query.len(),
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// nDCG values of one series, in row order.
pub fn series_values(rows: &[SweepRow], series: &str) -> Vec<f64> {
    rows.iter().filter(|r| r.series == series).map(|r| r.ndcg).collect()
}

/// Re-chunks the corpus at every target size (gold remapped through answer
/// spans) and evaluates each retriever on it.
pub fn chunk_size_sweep(
    corpus: &Corpus,
    retrievers: &[NamedRetriever],
    sizes: &[usize],
    k: usize,
) -> Result<Vec<SweepRow>> {
    if let Some(q) = corpus.queries.iter().find(|q| q.answer_span.is_none()) {
        return Err(Error::Eval(format!("query {} has no answer span to remap", q.query_id)));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let split = subsplit_corpus(corpus, size)?;
        for r in retrievers {
            let report = r.retriever.evaluate(&split, k)?;
            rows.push(row(size.to_string(), &r.name, &report));
        }
    }
    Ok(rows)
}

/// Seeded nested document samples: each count takes a prefix of one
/// shuffled order, so smaller samples are subsets of larger ones.
pub fn nested_samples(corpus: &Corpus, doc_counts: &[usize], seed: u64) -> Result<Vec<BTreeSet<String>>> {
    let mut ids: Vec<String> = corpus.documents.keys().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    doc_counts
        .iter()
        .map(|&n| {
            if n == 0 || n > ids.len() {
                return Err(Error::Eval(format!("cannot sample {n} of {} documents", ids.len())));
            }
            Ok(ids[..n].iter().cloned().collect())
        })
        .collect()
}

/// Evaluates each retriever on nested document samples; queries whose gold
/// documents fall outside a sample are dropped from it.
pub fn corpus_scaling_sweep(
    corpus: &Corpus,
    retrievers: &[NamedRetriever],
    doc_counts: &[usize],
    k: usize,
    seed: u64,
) -> Result<(Vec<SweepRow>, Vec<BTreeSet<String>>)> {
    let samples = nested_samples(corpus, doc_counts, seed)?;
    let mut rows = Vec::new();
    for (n, sample) in doc_counts.iter().zip(&samples) {
        let sub = corpus.restrict_to(sample);
        for r in retrievers {
            let report = r.retriever.evaluate(&sub, k)?;
            rows.push(row(n.to_string(), &r.name, &report));
        }
    }
    Ok((rows, samples))
}

/// Index mode matching a training pooling.
pub fn mode_for(pooling: TrainPooling) -> IndexMode {
    match pooling {
        TrainPooling::Independent => IndexMode::Independent,
        TrainPooling::LateChunk => IndexMode::LateChunk,
        TrainPooling::LateInteraction => IndexMode::LateInteraction,
    }
}

/// Trains one encoder per in-sequence weight from the same initial
/// parameters and seeds, then evaluates it on every task. Each weight also
/// gets a `mean` row averaging the tasks.
pub fn lambda_sweep(
    train_corpus: &Corpus,
    tasks: &[(String, Corpus)],
    lambdas: &[f64],
    encoder_config: &EncoderConfig,
    train_config: &TrainConfig,
    k: usize,
) -> Result<Vec<SweepRow>> {
    let initial = Encoder::new(encoder_config.clone())?;
    let mode = mode_for(train_config.pooling);
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut cfg = train_config.clone();
        cfg.loss.lambda_seq = lambda;
        let encoder = train(train_corpus, initial.clone(), &cfg)?.encoder;
        let retriever = Retriever::Dense { encoder, mode };
        let mut task_rows = Vec::with_capacity(tasks.len());
        for (name, corpus) in tasks {
            let report = retriever.evaluate(corpus, k)?;
            task_rows.push(row(lambda.to_string(), name, &report));
        }
        if !task_rows.is_empty() {
            let n = task_rows.len() as f64;
            let mean = SweepRow {
                point: lambda.to_string(),
                series: "mean".into(),
                ndcg: task_rows.iter().map(|r| r.ndcg).sum::<f64>() / n,
                recall: task_rows.iter().map(|r| r.recall).sum::<f64>() / n,
                queries: task_rows.iter().map(|r| r.queries).sum(),
            };
            rows.extend(task_rows);
            rows.push(mean);
        }
    }
    Ok(rows)
}

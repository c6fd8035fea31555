//! Batch construction and the optimisation loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::encoder::{Encoder, EncoderParams, TokenSequence, DOC, QRY};
use crate::error::{Error, Result};
use crate::loss::{insent_loss_with_grad, LossConfig, LossOutput, Rep, Scorer, TrainingBatch, Triplet};
use crate::pooling;

/// How chunk representations are produced while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPooling {
    /// Each chunk encoded on its own (the non-contextual baseline).
    Independent,
    /// Whole document encoded once, mean pooled per chunk.
    LateChunk,
    /// Whole document encoded once, token vectors kept per chunk.
    LateInteraction,
}

impl TrainPooling {
    pub fn scorer(self) -> Scorer {
        match self {
            TrainPooling::LateInteraction => Scorer::Maxsim,
            _ => Scorer::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub docs_per_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pooling: TrainPooling,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            warmup_frac: 0.05,
            epochs: 2,
            docs_per_batch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            pooling: TrainPooling::LateChunk,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Trainer(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if self.docs_per_batch == 0 {
            return bad("docs_per_batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.loss.scorer != self.pooling.scorer() {
            return bad(format!(
                "scorer {:?} does not match pooling {:?}",
                self.loss.scorer, self.pooling
            ));
        }
        Ok(())
    }
}

/// Documents and query indices making up one optimisation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub doc_ids: Vec<String>,
    /// Indices into `corpus.queries` with at least one gold chunk in the batch.
    pub query_indices: Vec<usize>,
}

fn fits(doc: &Document, encoder: &Encoder, pooling: TrainPooling) -> bool {
    let chunks = encoder.chunk_token_ids(doc);
    if chunks.iter().any(Vec::is_empty) {
        return false;
    }
    match pooling {
        TrainPooling::Independent => chunks.iter().all(|c| c.len() < encoder.config.max_seq_len),
        _ => TokenSequence::required_len(&chunks) <= encoder.config.max_seq_len,
    }
}

/// Documents usable for training, sorted by id. Oversized documents and
/// documents with token-less chunks are skipped with a warning.
pub fn trainable_documents(corpus: &Corpus, encoder: &Encoder, pooling: TrainPooling) -> Vec<String> {
    corpus
        .documents
        .values()
        .filter(|d| {
            let ok = fits(d, encoder, pooling);
            if !ok {
                log::warn!("skipping document `{}`: does not fit the encoder", d.doc_id);
            }
            ok
        })
        .map(|d| d.doc_id.clone())
        .collect()
}

/// Shuffles the usable documents with `seed ^ epoch` and groups them into
/// batches of `docs_per_batch`, dropping the last partial batch.
pub fn make_batches(
    corpus: &Corpus,
    usable: &[String],
    docs_per_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<BatchDescriptor>> {
    if docs_per_batch == 0 || usable.len() < docs_per_batch {
        return Err(Error::Trainer(format!(
            "no trainable batch: {} usable documents, {docs_per_batch} per batch",
            usable.len()
        )));
    }
    let mut by_doc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in corpus.queries.iter().enumerate() {
        let docs: BTreeSet<&str> = q.gold.iter().map(|g| g.doc_id.as_str()).collect();
        for d in docs {
            by_doc.entry(d).or_default().push(i);
        }
    }
    let mut order = usable.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(docs_per_batch)
        .map(|ids| {
            let queries: BTreeSet<usize> = ids
                .iter()
                .flat_map(|d| by_doc.get(d.as_str()).into_iter().flatten().copied())
                .collect();
            BatchDescriptor {
                doc_ids: ids.to_vec(),
                query_indices: queries.into_iter().collect(),
            }
        })
        .collect())
}

/// Linear warm-up to `lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    let warmup = (config.warmup_frac * total_steps as f64).ceil() as usize;
    if step < warmup {
        return config.lr * step as f64 / warmup as f64;
    }
    if warmup >= total_steps {
        return config.lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut AdamWState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * config.weight_decay;
    let eps = config.eps;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after AdamW update".into()));
    }
    Ok(())
}

fn reps_from_pass(
    pooling: TrainPooling,
    h: &Array2<f64>,
    seq: &TokenSequence,
) -> Result<Vec<Rep>> {
    Ok(match pooling {
        TrainPooling::LateInteraction => pooling::token_groups(h, seq)?.into_iter().map(Rep::Multi).collect(),
        _ => pooling::mean_pool(h, seq)?.into_iter().map(Rep::Single).collect(),
    })
}

fn rep_backward(pooling: TrainPooling, grads: &[Rep], h: &Array2<f64>, seq: &TokenSequence) -> Array2<f64> {
    let mut d = Array2::zeros(h.raw_dim());
    match pooling {
        TrainPooling::LateInteraction => {
            let gs: Vec<Array2<f64>> = grads.iter().map(|g| g.as_multi().expect("multi").clone()).collect();
            pooling::token_groups_backward(&gs, h, seq, &mut d);
        }
        _ => {
            let gs: Vec<_> = grads.iter().map(|g| g.as_single().expect("single").clone()).collect();
            pooling::mean_pool_backward(&gs, seq, &mut d);
        }
    }
    d
}

/// Loss and parameter gradient for one batch, through encoder, pooling and
/// scoring.
pub fn batch_gradient(
    encoder: &Encoder,
    corpus: &Corpus,
    batch: &BatchDescriptor,
    pooling: TrainPooling,
    loss_cfg: &LossConfig,
) -> Result<(LossOutput, EncoderParams)> {
    // Sequence layout: document sequences first (one per chunk when
    // independent), then one sequence per triplet query.
    let mut seqs = Vec::new();
    let mut doc_seq_ranges = Vec::with_capacity(batch.doc_ids.len());
    let mut positions = BTreeMap::new();
    for (pos, id) in batch.doc_ids.iter().enumerate() {
        let doc = corpus
            .documents
            .get(id)
            .ok_or_else(|| Error::Trainer(format!("unknown document `{id}`")))?;
        positions.insert(id.as_str(), pos);
        let chunks = encoder.chunk_token_ids(doc);
        let start = seqs.len();
        match pooling {
            TrainPooling::Independent => {
                for c in chunks {
                    seqs.push(encoder.sequence(DOC, &[c]).map_err(|e| Error::in_document(id, e))?);
                }
            }
            _ => seqs.push(encoder.sequence(DOC, &chunks).map_err(|e| Error::in_document(id, e))?),
        }
        doc_seq_ranges.push(start..seqs.len());
    }
    let tok = encoder.tokenizer();
    let mut positives = Vec::new();
    for &qi in &batch.query_indices {
        let q = &corpus.queries[qi];
        let ids = tok.encode(&q.text);
        for g in &q.gold {
            if let Some(&pos) = positions.get(g.doc_id.as_str()) {
                positives.push((seqs.len(), (pos, g.chunk_index)));
                seqs.push(encoder.sequence(QRY, std::slice::from_ref(&ids))?);
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::Loss("batch has no triplets".into()));
    }

    let mut output = None;
    let (_, grads) = encoder.gradient(&seqs, |hidden| {
        let mut docs = Vec::with_capacity(doc_seq_ranges.len());
        for range in &doc_seq_ranges {
            let mut reps = Vec::new();
            for s in range.clone() {
                reps.extend(reps_from_pass(pooling, hidden[s], &seqs[s])?);
            }
            docs.push(reps);
        }
        let mut triplets = Vec::with_capacity(positives.len());
        for &(s, positive) in &positives {
            let query = reps_from_pass(pooling, hidden[s], &seqs[s])?.swap_remove(0);
            triplets.push(Triplet { query, positive });
        }
        let tb = TrainingBatch { docs, triplets };
        let (out, g) = insent_loss_with_grad(&tb, loss_cfg)?;

        let mut d_hidden: Vec<Array2<f64>> = Vec::with_capacity(seqs.len());
        for (range, doc_grads) in doc_seq_ranges.iter().zip(&g.docs) {
            let mut offset = 0;
            for s in range.clone() {
                let n = seqs[s].chunk_token_spans.len();
                d_hidden.push(rep_backward(pooling, &doc_grads[offset..offset + n], hidden[s], &seqs[s]));
                offset += n;
            }
        }
        for (&(s, _), qg) in positives.iter().zip(&g.queries) {
            d_hidden.push(rep_backward(pooling, std::slice::from_ref(qg), hidden[s], &seqs[s]));
        }
        let value = out.loss;
        output = Some(out);
        Ok((value, d_hidden))
    })?;
    Ok((output.expect("loss closure ran"), grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_seq: f64,
    pub l_batch: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub encoder: Encoder,
    pub log: Vec<LogRow>,
    pub docs_used: usize,
}

/// Trains `encoder` in place of a fresh copy and returns it with the step log.
pub fn train(corpus: &Corpus, encoder: Encoder, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let mut encoder = encoder;
    let usable = trainable_documents(corpus, &encoder, config.pooling);
    let mut log = Vec::new();
    if config.epochs == 0 {
        return Ok(TrainOutput {
            encoder,
            log,
            docs_used: usable.len(),
        });
    }
    let per_epoch = usable.len() / config.docs_per_batch;
    let total = config.epochs * per_epoch;
    let mut state = AdamWState::new(&encoder.params);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in make_batches(corpus, &usable, config.docs_per_batch, config.seed, epoch)? {
            let lr = lr_at(step, total, config);
            if batch.query_indices.is_empty() {
                log::warn!("step {step}: batch has no queries, skipping update");
                log.push(LogRow {
                    step,
                    lr,
                    loss: 0.0,
                    l_seq: 0.0,
                    l_batch: 0.0,
                });
                step += 1;
                continue;
            }
            let (out, grads) = batch_gradient(&encoder, corpus, &batch, config.pooling, &config.loss).map_err(
                |e| match e {
                    Error::NonFinite(what) => Error::Diverged { step, reason: what },
                    e => e,
                },
            )?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite loss".into(),
                });
            }
            adamw_step(&mut encoder.params, &grads, &mut state, lr, config).map_err(|e| Error::Diverged {
                step,
                reason: e.to_string(),
            })?;
            debug_assert!(encoder.params.is_finite());
            log.push(LogRow {
                step,
                lr,
                loss: out.loss,
                l_seq: out.l_seq,
                l_batch: out.l_batch,
            });
            step += 1;
        }
    }
    Ok(TrainOutput {
        encoder,
        log,
        docs_used: usable.len(),
    })
}

/// `step,lr,loss,l_seq,l_batch` with a header row.
pub fn loss_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,lr,loss,l_seq,l_batch\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:.9},{:.9},{:.9}", r.step, r.lr, r.loss, r.l_seq, r.l_batch);
    }
    out
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, loss_log_csv(rows)).map_err(|e| Error::io(path, e))
}

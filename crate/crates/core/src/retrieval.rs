//! Exhaustive chunk search: dense single-vector, late-interaction
//! multi-vector and Okapi BM25 indices.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkKey, Corpus};
use crate::encoder::{Encoder, Tokenizer};
use crate::error::{Error, Result};
use crate::loss::{cosine, maxsim};
use crate::persist::{bytes_to_f64s, f64s_to_bytes, read_container, write_container};
use crate::{par, pooling};

pub const INDEX_MAGIC: &str = "CTXEMB-INDEX";
pub const INDEX_VERSION: u32 = 1;

/// How chunk representations are computed from a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IndexMode {
    Independent,
    LateChunk,
    LateInteraction,
    SlidingWindow { window_tokens: usize, overlap_chunks: usize },
}

impl IndexMode {
    pub fn kind(self) -> IndexKind {
        match self {
            IndexMode::LateInteraction => IndexKind::Multi,
            _ => IndexKind::Single,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexMode::Independent => "independent",
            IndexMode::LateChunk => "late_chunk",
            IndexMode::LateInteraction => "late_interaction",
            IndexMode::SlidingWindow { .. } => "sliding_window",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Single,
    Multi,
    Bm25,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

/// Term counts of one BM25 document (here: one chunk).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TermCounts {
    pub tf: HashMap<String, usize>,
    pub len: usize,
}

impl TermCounts {
    pub fn from_terms<S: AsRef<str>>(terms: &[S]) -> Self {
        let mut tf = HashMap::new();
        for t in terms {
            *tf.entry(t.as_ref().to_string()).or_insert(0) += 1;
        }
        Self { tf, len: terms.len() }
    }
}

/// Collection statistics for BM25.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bm25Stats {
    pub n_docs: usize,
    pub avg_len: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl Bm25Stats {
    pub fn from_counts(chunks: &[TermCounts]) -> Self {
        let mut doc_freq = HashMap::new();
        for c in chunks {
            for t in c.tf.keys() {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let total: usize = chunks.iter().map(|c| c.len).sum();
        let avg_len = if chunks.is_empty() { 0.0 } else { total as f64 / chunks.len() as f64 };
        Self {
            n_docs: chunks.len(),
            avg_len,
            doc_freq,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let big_n = self.n_docs as f64;
        ((big_n - n + 0.5) / (n + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 of a chunk for a bag of query terms; repeated terms count
/// once per occurrence.
pub fn bm25_score<S: AsRef<str>>(query_terms: &[S], chunk: &TermCounts, stats: &Bm25Stats, params: Bm25Params) -> f64 {
    let norm = if stats.avg_len > 0.0 {
        1.0 - params.b + params.b * chunk.len as f64 / stats.avg_len
    } else {
        1.0
    };
    query_terms
        .iter()
        .map(|t| {
            let t = t.as_ref();
            match chunk.tf.get(t) {
                Some(&tf) => {
                    let tf = tf as f64;
                    stats.idf(t) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
                }
                None => 0.0,
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
enum Store {
    Single(Array2<f64>),
    /// Token vectors of all chunks, grouped per chunk: chunk `i` owns rows
    /// `offsets[i]..offsets[i + 1]`.
    Multi { vectors: Array2<f64>, offsets: Vec<usize> },
    Bm25 {
        terms: Vec<Vec<String>>,
        counts: Vec<TermCounts>,
        stats: Bm25Stats,
        tokenizer: Tokenizer,
        params: Bm25Params,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkIndex {
    pub mode: Option<IndexMode>,
    pub encoder_checksum: Option<String>,
    keys: Vec<ChunkKey>,
    store: Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub chunk_index: usize,
    pub score: f64,
}

impl Hit {
    pub fn key(&self) -> ChunkKey {
        ChunkKey::new(self.doc_id.clone(), self.chunk_index)
    }
}

/// Hits in descending score order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn keys(&self) -> Vec<ChunkKey> {
        self.hits.iter().map(Hit::key).collect()
    }
}

/// Query representation matching an index kind.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryRep {
    Single(Array1<f64>),
    Multi(Array2<f64>),
    Terms(Vec<String>),
}

impl ChunkIndex {
    pub fn kind(&self) -> IndexKind {
        match self.store {
            Store::Single(_) => IndexKind::Single,
            Store::Multi { .. } => IndexKind::Multi,
            Store::Bm25 { .. } => IndexKind::Bm25,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[ChunkKey] {
        &self.keys
    }

    pub fn dim(&self) -> usize {
        match &self.store {
            Store::Single(m) => m.ncols(),
            Store::Multi { vectors, .. } => vectors.ncols(),
            Store::Bm25 { .. } => 0,
        }
    }

    pub fn contains(&self, key: &ChunkKey) -> bool {
        self.keys.binary_search(key).is_ok()
    }

    /// Single vector of entry `i`.
    pub fn vector(&self, i: usize) -> Option<Array1<f64>> {
        match &self.store {
            Store::Single(m) => Some(m.row(i).to_owned()),
            _ => None,
        }
    }

    /// Token vectors of entry `i`.
    pub fn token_vectors(&self, i: usize) -> Option<Array2<f64>> {
        match &self.store {
            Store::Multi { vectors, offsets } => {
                Some(vectors.slice(ndarray::s![offsets[i]..offsets[i + 1], ..]).to_owned())
            }
            _ => None,
        }
    }

    /// Fails unless `encoder` is the one this dense index was built with.
    pub fn check_encoder(&self, encoder: &Encoder) -> Result<()> {
        if let Some(expected) = &self.encoder_checksum {
            let actual = encoder.params.checksum();
            if &actual != expected {
                return Err(Error::Retrieval(format!(
                    "index built with encoder {expected}, searched with {actual}"
                )));
            }
        }
        Ok(())
    }

    /// Represents `query_text` the way this index expects. The encoder is
    /// not checked against the index; see [`ChunkIndex::check_encoder`].
    pub fn represent_query(&self, query_text: &str, encoder: Option<&Encoder>) -> Result<QueryRep> {
        if let Store::Bm25 { tokenizer, .. } = &self.store {
            return Ok(QueryRep::Terms(tokenizer.tokenize(query_text)));
        }
        let encoder = encoder.ok_or_else(|| Error::Retrieval("dense index needs an encoder".into()))?;
        let seq = encoder.encode_query_sequence(query_text)?;
        if seq.chunk_token_spans[0].is_empty() {
            return Err(Error::Retrieval(format!("query `{query_text}` has no tokens")));
        }
        let h = encoder.forward(&seq)?;
        Ok(match self.kind() {
            IndexKind::Single => QueryRep::Single(pooling::query_vector(&h, &seq)?),
            _ => QueryRep::Multi(pooling::query_tokens(&h, &seq)?),
        })
    }

    /// Scores of every entry, in entry order.
    pub fn score_all(&self, query: &QueryRep) -> Result<Vec<f64>> {
        match (&self.store, query) {
            (Store::Single(m), QueryRep::Single(q)) => {
                if q.len() != m.ncols() {
                    return Err(Error::Retrieval("query dimension does not match index".into()));
                }
                m.axis_iter(Axis(0)).map(|row| cosine(q, &row.to_owned())).collect()
            }
            (Store::Multi { vectors, offsets }, QueryRep::Multi(q)) => {
                if q.ncols() != vectors.ncols() {
                    return Err(Error::Retrieval("query dimension does not match index".into()));
                }
                Ok(offsets
                    .windows(2)
                    .map(|w| maxsim(q, &vectors.slice(ndarray::s![w[0]..w[1], ..]).to_owned()))
                    .collect())
            }
            (
                Store::Bm25 {
                    counts,
                    stats,
                    params,
                    ..
                },
                QueryRep::Terms(terms),
            ) => Ok(counts.iter().map(|c| bm25_score(terms, c, stats, *params)).collect()),
            _ => Err(Error::Retrieval("query representation does not match index kind".into())),
        }
    }

    /// Top `k` entries for an already represented query.
    pub fn search_rep(&self, query: &QueryRep, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::Retrieval("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Retrieval("index is empty".into()));
        }
        let scores = self.score_all(query)?;
        // Entries are sorted by key, so a stable sort resolves ties by key.
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order.truncate(k);
        Ok(SearchResult {
            hits: order
                .into_iter()
                .map(|i| Hit {
                    doc_id: self.keys[i].doc_id.clone(),
                    chunk_index: self.keys[i].chunk_index,
                    score: scores[i],
                })
                .collect(),
        })
    }
}

/// Top `k` chunks for `query_text`; dense indices need the encoder they were
/// built with.
pub fn search(index: &ChunkIndex, query_text: &str, encoder: Option<&Encoder>, k: usize) -> Result<SearchResult> {
    if index.is_empty() {
        return Err(Error::Retrieval("index is empty".into()));
    }
    if let Some(enc) = encoder {
        index.check_encoder(enc)?;
    }
    let rep = index.represent_query(query_text, encoder)?;
    index.search_rep(&rep, k)
}

enum DocReps {
    Single(Vec<Array1<f64>>),
    Multi(Vec<Array2<f64>>),
}

fn encode_document(doc: &crate::corpus::Document, encoder: &Encoder, mode: IndexMode) -> Result<DocReps> {
    let single = |v: Vec<pooling::ChunkEmbedding>| DocReps::Single(v.into_iter().map(|c| c.vector).collect());
    Ok(match mode {
        IndexMode::Independent => single(pooling::encode_chunks_independent(doc, encoder)?),
        IndexMode::LateChunk => single(pooling::late_chunk_document(doc, encoder)?),
        IndexMode::SlidingWindow {
            window_tokens,
            overlap_chunks,
        } => single(pooling::sliding_window_late_chunk(doc, encoder, window_tokens, overlap_chunks)?),
        IndexMode::LateInteraction => DocReps::Multi(
            pooling::late_interaction_document(doc, encoder)?
                .into_iter()
                .map(|c| c.vectors)
                .collect(),
        ),
    })
}

/// Encodes every chunk of `corpus`; documents are processed in parallel.
pub fn build_index(corpus: &Corpus, encoder: &Encoder, mode: IndexMode) -> Result<ChunkIndex> {
    let docs: Vec<_> = corpus.documents.values().collect();
    let reps = par::try_map(&docs, |doc| {
        encode_document(doc, encoder, mode).map_err(|e| Error::in_document(&doc.doc_id, e))
    })?;
    let mut keys = Vec::with_capacity(corpus.num_chunks());
    for doc in &docs {
        keys.extend((0..doc.chunks.len()).map(|i| ChunkKey::new(doc.doc_id.clone(), i)));
    }
    let d = encoder.config.dim;
    let store = match mode.kind() {
        IndexKind::Single => {
            let mut flat = Vec::with_capacity(keys.len() * d);
            for r in reps {
                let DocReps::Single(vs) = r else { unreachable!("mode decides the kind") };
                for v in vs {
                    flat.extend(v.iter());
                }
            }
            Store::Single(Array2::from_shape_vec((keys.len(), d), flat).expect("one row per chunk"))
        }
        _ => {
            let mut flat = Vec::new();
            let mut offsets = vec![0];
            for r in reps {
                let DocReps::Multi(ms) = r else { unreachable!("mode decides the kind") };
                for m in ms {
                    flat.extend(m.iter());
                    offsets.push(offsets.last().expect("non-empty") + m.nrows());
                }
            }
            let rows = *offsets.last().expect("non-empty");
            Store::Multi {
                vectors: Array2::from_shape_vec((rows, d), flat).expect("grouped rows"),
                offsets,
            }
        }
    };
    Ok(ChunkIndex {
        mode: Some(mode),
        encoder_checksum: Some(encoder.params.checksum()),
        keys,
        store,
    })
}

fn bm25_index(keys: Vec<ChunkKey>, terms: Vec<Vec<String>>, tokenizer: Tokenizer, params: Bm25Params) -> ChunkIndex {
    let counts: Vec<TermCounts> = terms.iter().map(|t| TermCounts::from_terms(t)).collect();
    let stats = Bm25Stats::from_counts(&counts);
    ChunkIndex {
        mode: None,
        encoder_checksum: None,
        keys,
        store: Store::Bm25 {
            terms,
            counts,
            stats,
            tokenizer,
            params,
        },
    }
}

/// Lexical index with every chunk as a BM25 document.
pub fn build_bm25_index(corpus: &Corpus, tokenizer: Tokenizer, params: Bm25Params) -> ChunkIndex {
    let mut keys = Vec::new();
    let mut terms = Vec::new();
    for doc in corpus.documents.values() {
        for (i, text) in doc.chunk_texts().into_iter().enumerate() {
            keys.push(ChunkKey::new(doc.doc_id.clone(), i));
            terms.push(tokenizer.tokenize(text));
        }
    }
    bm25_index(keys, terms, tokenizer, params)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    kind: IndexKind,
    mode: Option<IndexMode>,
    dim: usize,
    entries: usize,
    encoder_checksum: Option<String>,
    keys: Vec<(String, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows_per_entry: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bm25: Option<Bm25Header>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Bm25Header {
    tokenizer: Tokenizer,
    params: Bm25Params,
    terms: Vec<Vec<String>>,
}

pub fn save_index(path: &Path, index: &ChunkIndex) -> Result<()> {
    let mut payload = Vec::new();
    let (rows_per_entry, bm25) = match &index.store {
        Store::Single(m) => {
            f64s_to_bytes(m.iter(), &mut payload);
            (None, None)
        }
        Store::Multi { vectors, offsets } => {
            f64s_to_bytes(vectors.iter(), &mut payload);
            (Some(offsets.windows(2).map(|w| w[1] - w[0]).collect()), None)
        }
        Store::Bm25 {
            terms,
            tokenizer,
            params,
            ..
        } => (
            None,
            Some(Bm25Header {
                tokenizer: *tokenizer,
                params: *params,
                terms: terms.clone(),
            }),
        ),
    };
    let header = IndexHeader {
        version: INDEX_VERSION,
        kind: index.kind(),
        mode: index.mode,
        dim: index.dim(),
        entries: index.len(),
        encoder_checksum: index.encoder_checksum.clone(),
        keys: index.keys.iter().map(|k| (k.doc_id.clone(), k.chunk_index)).collect(),
        rows_per_entry,
        bm25,
    };
    write_container(path, INDEX_MAGIC, &header, &payload)
}

pub fn load_index(path: &Path) -> Result<ChunkIndex> {
    let bad = |msg: &str| Error::Retrieval(format!("{}: {msg}", path.display()));
    let (header, payload): (IndexHeader, _) = read_container(path, INDEX_MAGIC)?;
    if header.version != INDEX_VERSION {
        return Err(bad(&format!("unsupported index version {}", header.version)));
    }
    if header.keys.len() != header.entries {
        return Err(bad("entry count does not match keys"));
    }
    let keys: Vec<ChunkKey> = header.keys.into_iter().map(|(d, i)| ChunkKey::new(d, i)).collect();
    if keys.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("entries are not unique and sorted"));
    }
    let values = bytes_to_f64s(&payload)?;
    let d = header.dim;
    let index = match header.kind {
        IndexKind::Single => {
            let m = Array2::from_shape_vec((keys.len(), d), values).map_err(|_| bad("payload size mismatch"))?;
            ChunkIndex {
                mode: header.mode,
                encoder_checksum: header.encoder_checksum,
                keys,
                store: Store::Single(m),
            }
        }
        IndexKind::Multi => {
            let rows = header.rows_per_entry.ok_or_else(|| bad("missing token counts"))?;
            if rows.len() != keys.len() {
                return Err(bad("token counts do not match entries"));
            }
            let mut offsets = vec![0];
            for r in rows {
                offsets.push(offsets.last().expect("non-empty") + r);
            }
            let total = *offsets.last().expect("non-empty");
            let vectors = Array2::from_shape_vec((total, d), values).map_err(|_| bad("payload size mismatch"))?;
            ChunkIndex {
                mode: header.mode,
                encoder_checksum: header.encoder_checksum,
                keys,
                store: Store::Multi { vectors, offsets },
            }
        }
        IndexKind::Bm25 => {
            let b = header.bm25.ok_or_else(|| bad("missing term lists"))?;
            if b.terms.len() != keys.len() {
                return Err(bad("term lists do not match entries"));
            }
            bm25_index(keys, b.terms, b.tokenizer, b.params)
        }
    };
    Ok(index)
}

//! Documents, chunks and queries, plus their JSONL representation.
//!
//! All offsets are counted in Unicode scalar values, never bytes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open `[start, end)` range of character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &CharSpan) -> usize {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        end.saturating_sub(start)
    }
}

/// Identifies a chunk within a corpus. Orders by `(doc_id, chunk_index)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkKey {
    pub doc_id: String,
    pub chunk_index: usize,
}

impl ChunkKey {
    pub fn new(doc_id: impl Into<String>, chunk_index: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            chunk_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub char_span: CharSpan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub chunks: Vec<Chunk>,
}

impl Document {
    /// Builds a document from character spans, assigning dense chunk indices.
    pub fn from_spans(doc_id: impl Into<String>, text: impl Into<String>, spans: &[CharSpan]) -> Self {
        let doc_id = doc_id.into();
        let chunks = spans
            .iter()
            .enumerate()
            .map(|(chunk_index, &char_span)| Chunk {
                doc_id: doc_id.clone(),
                chunk_index,
                char_span,
            })
            .collect();
        Self {
            doc_id,
            text: text.into(),
            chunks,
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn chunk_text(&self, chunk_index: usize) -> &str {
        let span = self.chunks[chunk_index].char_span;
        slice_chars(&self.text, span)
    }

    pub fn chunk_texts(&self) -> Vec<&str> {
        let bounds = char_boundaries(&self.text);
        self.chunks
            .iter()
            .map(|c| &self.text[bounds[c.char_span.start]..bounds[c.char_span.end]])
            .collect()
    }

    pub fn spans(&self) -> Vec<CharSpan> {
        self.chunks.iter().map(|c| c.char_span).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidDocument {
            doc_id: self.doc_id.clone(),
            reason,
        };
        if self.chunks.is_empty() {
            return Err(invalid("document has no chunks".into()));
        }
        let len = self.char_len();
        let mut prev_end = 0;
        for (i, chunk) in self.chunks.iter().enumerate() {
            if chunk.chunk_index != i {
                return Err(invalid(format!("chunk index {} at position {i}", chunk.chunk_index)));
            }
            if chunk.doc_id != self.doc_id {
                return Err(invalid(format!("chunk {i} belongs to `{}`", chunk.doc_id)));
            }
            let span = chunk.char_span;
            if span.end <= span.start {
                return Err(invalid(format!("chunk {i} span [{}, {}) is empty", span.start, span.end)));
            }
            if span.start < prev_end {
                return Err(invalid(format!("chunk {i} overlaps or precedes chunk {}", i.saturating_sub(1))));
            }
            if span.end > len {
                return Err(invalid(format!("chunk {i} ends at {} past text length {len}", span.end)));
            }
            prev_end = span.end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
}

impl AnswerSpan {
    pub fn span(&self) -> CharSpan {
        CharSpan::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub gold: BTreeSet<ChunkKey>,
    pub answer_span: Option<AnswerSpan>,
}

/// An immutable collection of documents and the queries that target them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub documents: BTreeMap<String, Document>,
    pub queries: Vec<Query>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, queries: Vec<Query>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for doc in documents {
            if map.contains_key(&doc.doc_id) {
                return Err(Error::DuplicateId {
                    kind: "document",
                    id: doc.doc_id,
                });
            }
            map.insert(doc.doc_id.clone(), doc);
        }
        let corpus = Corpus {
            documents: map,
            queries,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        for doc in self.documents.values() {
            doc.validate()?;
        }
        let mut seen = HashSet::new();
        for query in &self.queries {
            if !seen.insert(query.query_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "query",
                    id: query.query_id.clone(),
                });
            }
            self.validate_query(query)?;
        }
        Ok(())
    }

    fn validate_query(&self, query: &Query) -> Result<()> {
        if query.gold.is_empty() {
            return Err(Error::InvalidQuery {
                query_id: query.query_id.clone(),
                reason: "gold set is empty".into(),
            });
        }
        for key in &query.gold {
            let resolves = self
                .documents
                .get(&key.doc_id)
                .is_some_and(|d| key.chunk_index < d.chunks.len());
            if !resolves {
                return Err(Error::DanglingGold {
                    query_id: query.query_id.clone(),
                    doc_id: key.doc_id.clone(),
                    chunk_index: key.chunk_index,
                });
            }
        }
        if let Some(answer) = &query.answer_span {
            let Some(doc) = self.documents.get(&answer.doc_id) else {
                return Err(Error::InvalidQuery {
                    query_id: query.query_id.clone(),
                    reason: format!("answer span names unknown document `{}`", answer.doc_id),
                });
            };
            if answer.end <= answer.start || answer.end > doc.char_len() {
                return Err(Error::InvalidQuery {
                    query_id: query.query_id.clone(),
                    reason: format!("answer span [{}, {}) outside document", answer.start, answer.end),
                });
            }
        }
        Ok(())
    }

    pub fn num_chunks(&self) -> usize {
        self.documents.values().map(|d| d.chunks.len()).sum()
    }

    pub fn chunk_text(&self, key: &ChunkKey) -> Option<&str> {
        let doc = self.documents.get(&key.doc_id)?;
        (key.chunk_index < doc.chunks.len()).then(|| doc.chunk_text(key.chunk_index))
    }

    /// Keeps the listed documents and the queries whose gold documents are all kept.
    pub fn restrict_to(&self, doc_ids: &BTreeSet<String>) -> Corpus {
        let documents = self
            .documents
            .iter()
            .filter(|(id, _)| doc_ids.contains(*id))
            .map(|(id, d)| (id.clone(), d.clone()))
            .collect();
        let queries = self
            .queries
            .iter()
            .filter(|q| q.gold.iter().all(|g| doc_ids.contains(&g.doc_id)))
            .cloned()
            .collect();
        Corpus { documents, queries }
    }
}

/// Byte offsets of every char boundary, including the final one.
pub fn char_boundaries(text: &str) -> Vec<usize> {
    let mut bounds: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    bounds.push(text.len());
    bounds
}

/// Slices `text` by character offsets.
pub fn slice_chars(text: &str, span: CharSpan) -> &str {
    let mut iter = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let start = iter.nth(span.start).unwrap_or(text.len());
    let end = if span.end > span.start {
        iter.nth(span.end - span.start - 1).unwrap_or(text.len())
    } else {
        start
    };
    &text[start..end]
}

// ---------------------------------------------------------------------------
// JSONL records

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanRecord {
    start: usize,
    end: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    doc_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chunks: Option<Vec<SpanRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldRecord {
    doc_id: String,
    chunk_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    query_id: String,
    text: String,
    gold: Vec<GoldRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_span: Option<AnswerSpan>,
}

/// A document as read from disk, before chunking is enforced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub text: String,
    pub spans: Option<Vec<CharSpan>>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&record).expect("records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a docs file without requiring chunk spans.
pub fn load_raw_documents(path: &Path) -> Result<Vec<RawDocument>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in read_jsonl::<DocRecord>(path)? {
        if !seen.insert(rec.doc_id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate document id `{}`", rec.doc_id),
            });
        }
        out.push(RawDocument {
            doc_id: rec.doc_id,
            text: rec.text,
            spans: rec
                .chunks
                .map(|cs| cs.into_iter().map(|s| CharSpan::new(s.start, s.end)).collect()),
        });
    }
    Ok(out)
}

/// Writes documents (sorted by `doc_id`) as docs JSONL.
pub fn save_documents<'a>(path: &Path, docs: impl IntoIterator<Item = &'a Document>) -> Result<()> {
    let mut docs: Vec<&Document> = docs.into_iter().collect();
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    write_jsonl(
        path,
        docs.into_iter().map(|d| DocRecord {
            doc_id: d.doc_id.clone(),
            text: d.text.clone(),
            chunks: Some(
                d.chunks
                    .iter()
                    .map(|c| SpanRecord {
                        start: c.char_span.start,
                        end: c.char_span.end,
                    })
                    .collect(),
            ),
        }),
    )
}

/// Loads chunked documents; the returned corpus has no queries.
pub fn load_documents(docs_path: &Path) -> Result<Corpus> {
    let mut documents = BTreeMap::new();
    for (line, rec) in read_jsonl::<DocRecord>(docs_path)? {
        let parse_err = |message: String| Error::Parse {
            path: docs_path.to_path_buf(),
            line,
            message,
        };
        let Some(spans) = rec.chunks else {
            return Err(parse_err(format!(
                "document `{}` has no chunks; run the chunker first",
                rec.doc_id
            )));
        };
        let spans: Vec<CharSpan> = spans.into_iter().map(|s| CharSpan::new(s.start, s.end)).collect();
        let doc = Document::from_spans(rec.doc_id.clone(), rec.text, &spans);
        doc.validate().map_err(|e| parse_err(e.to_string()))?;
        if documents.insert(rec.doc_id.clone(), doc).is_some() {
            return Err(Error::DuplicateId {
                kind: "document",
                id: rec.doc_id,
            });
        }
    }
    Ok(Corpus {
        documents,
        queries: Vec::new(),
    })
}

fn read_queries(path: &Path) -> Result<Vec<(usize, Query)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in read_jsonl::<QueryRecord>(path)? {
        if !seen.insert(rec.query_id.clone()) {
            return Err(Error::DuplicateId {
                kind: "query",
                id: rec.query_id,
            });
        }
        let query = Query {
            query_id: rec.query_id,
            text: rec.text,
            gold: rec
                .gold
                .into_iter()
                .map(|g| ChunkKey::new(g.doc_id, g.chunk_index))
                .collect(),
            answer_span: rec.answer_span,
        };
        out.push((line, query));
    }
    Ok(out)
}

/// Loads queries without resolving their gold chunks against documents.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    Ok(read_queries(path)?.into_iter().map(|(_, q)| q).collect())
}

/// Loads and validates a corpus from docs and queries JSONL files.
pub fn load_corpus(docs_path: &Path, queries_path: &Path) -> Result<Corpus> {
    let mut corpus = load_documents(docs_path)?;
    let mut queries = Vec::new();
    for (line, query) in read_queries(queries_path)? {
        corpus.validate_query(&query).map_err(|e| match e {
            e @ Error::DanglingGold { .. } => e,
            other => Error::Parse {
                path: queries_path.to_path_buf(),
                line,
                message: other.to_string(),
            },
        })?;
        queries.push(query);
    }
    corpus.queries = queries;
    Ok(corpus)
}

/// Writes a corpus: documents sorted by `doc_id`, queries in corpus order.
pub fn save_corpus(corpus: &Corpus, docs_path: &Path, queries_path: &Path) -> Result<()> {
    save_documents(docs_path, corpus.documents.values())?;
    write_jsonl(
        queries_path,
        corpus.queries.iter().map(|q| QueryRecord {
            query_id: q.query_id.clone(),
            text: q.text.clone(),
            gold: q
                .gold
                .iter()
                .map(|g| GoldRecord {
                    doc_id: g.doc_id.clone(),
                    chunk_index: g.chunk_index,
                })
                .collect(),
            answer_span: q.answer_span.clone(),
        }),
    )
}

//! Structure-aware recursive character splitting and re-chunking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CharSpan, ChunkKey, Corpus, Document, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkerConfig {
    pub max_chars: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        Self {
            max_chars: 1000,
            separators: vec!["\n\n".into(), "\n".into(), ". ".into(), " ".into()],
        }
    }
}

impl ChunkerConfig {
    pub fn with_max_chars(max_chars: usize) -> Self {
        Self {
            max_chars,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_chars == 0 {
            return Err(Error::Chunking("max_chars must be at least 1".into()));
        }
        match self.separators.last() {
            None => Err(Error::Chunking("separator list is empty".into())),
            Some(last) if last.chars().count() != 1 => Err(Error::Chunking(
                "separator list must end with a single-character separator".into(),
            )),
            Some(_) if self.separators.iter().any(|s| s.is_empty()) => {
                Err(Error::Chunking("separators must be non-empty".into()))
            }
            Some(_) => Ok(()),
        }
    }
}

struct Splitter<'a> {
    chars: &'a [char],
    seps: Vec<Vec<char>>,
    max: usize,
}

impl Splitter<'_> {
    fn ends_with(&self, span: CharSpan, sep: &[char]) -> bool {
        span.len() >= sep.len() && &self.chars[span.end - sep.len()..span.end] == sep
    }

    /// Length of a piece not counting the separator that terminates it.
    fn content_len(&self, span: CharSpan, level: usize) -> usize {
        let sep = &self.seps[level];
        if self.ends_with(span, sep) {
            span.len() - sep.len()
        } else {
            span.len()
        }
    }

    fn split_on(&self, span: CharSpan, sep: &[char]) -> Vec<CharSpan> {
        let mut pieces = Vec::new();
        let mut start = span.start;
        let mut i = span.start;
        while i + sep.len() <= span.end {
            if &self.chars[i..i + sep.len()] == sep {
                let end = i + sep.len();
                pieces.push(CharSpan::new(start, end));
                start = end;
                i = end;
            } else {
                i += 1;
            }
        }
        if start < span.end {
            pieces.push(CharSpan::new(start, span.end));
        }
        pieces
    }

    fn hard_split(&self, span: CharSpan, out: &mut Vec<CharSpan>) {
        let mut start = span.start;
        while start < span.end {
            let end = (start + self.max).min(span.end);
            out.push(CharSpan::new(start, end));
            start = end;
        }
    }

    fn split(&self, span: CharSpan, level: usize, out: &mut Vec<CharSpan>) {
        if span.len() <= self.max {
            out.push(span);
            return;
        }
        if level == self.seps.len() {
            self.hard_split(span, out);
            return;
        }
        let pieces = self.split_on(span, &self.seps[level]);
        if pieces.len() <= 1 {
            self.split(span, level + 1, out);
            return;
        }
        let mut group: Option<CharSpan> = None;
        for piece in pieces {
            if self.content_len(piece, level) > self.max {
                if let Some(g) = group.take() {
                    out.push(g);
                }
                self.split(piece, level + 1, out);
                continue;
            }
            group = match group {
                None => Some(piece),
                Some(g) => {
                    let merged = CharSpan::new(g.start, piece.end);
                    if self.content_len(merged, level) <= self.max {
                        Some(merged)
                    } else {
                        out.push(g);
                        Some(piece)
                    }
                }
            };
        }
        if let Some(g) = group {
            out.push(g);
        }
    }
}

/// Splits `text` into character spans that partition it.
///
/// Each level splits on its separator (kept at the end of the preceding
/// piece) and greedily merges neighbours while their length, not counting the
/// trailing separator, stays within `max_chars`. Oversized pieces recurse into
/// the next level; once separators are exhausted the piece is cut every
/// `max_chars` characters.
pub fn recursive_split(text: &str, config: &ChunkerConfig) -> Vec<CharSpan> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    let splitter = Splitter {
        chars: &chars,
        seps: config.separators.iter().map(|s| s.chars().collect()).collect(),
        max: config.max_chars.max(1),
    };
    let mut out = Vec::new();
    splitter.split(CharSpan::new(0, chars.len()), 0, &mut out);
    out
}

/// Old chunk index → the new chunk indices that replaced it.
pub type ChunkMapping = BTreeMap<usize, Vec<usize>>;

/// Splits every chunk of `doc` at `target_chars`, reassigning dense indices.
pub fn subsplit_chunks(doc: &Document, target_chars: usize) -> (Document, ChunkMapping) {
    let config = ChunkerConfig::with_max_chars(target_chars);
    let texts = doc.chunk_texts();
    let mut spans = Vec::new();
    let mut mapping = ChunkMapping::new();
    for (chunk, text) in doc.chunks.iter().zip(texts) {
        let offset = chunk.char_span.start;
        let new: Vec<usize> = recursive_split(text, &config)
            .into_iter()
            .map(|s| {
                spans.push(CharSpan::new(s.start + offset, s.end + offset));
                spans.len() - 1
            })
            .collect();
        mapping.insert(chunk.chunk_index, new);
    }
    (Document::from_spans(doc.doc_id.clone(), doc.text.clone(), &spans), mapping)
}

/// Re-targets a query's gold chunks in `new_doc` after [`subsplit_chunks`].
///
/// With an answer span the new gold is the sub-chunk overlapping it most
/// (lowest index on ties). Without one, each gold chunk of this document maps
/// to all of its sub-chunks. Gold entries in other documents are kept.
pub fn remap_gold(query: &Query, mapping: &ChunkMapping, new_doc: &Document) -> Result<Query> {
    let mut gold: BTreeSet<ChunkKey> = query
        .gold
        .iter()
        .filter(|g| g.doc_id != new_doc.doc_id)
        .cloned()
        .collect();
    match &query.answer_span {
        Some(answer) if answer.doc_id == new_doc.doc_id => {
            let span = answer.span();
            let best = new_doc
                .chunks
                .iter()
                .map(|c| (c.char_span.overlap(&span), c.chunk_index))
                .filter(|&(overlap, _)| overlap > 0)
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            let Some((_, index)) = best else {
                return Err(Error::Chunking(format!(
                    "internal: answer span of query `{}` overlaps no sub-chunk",
                    query.query_id
                )));
            };
            gold.insert(ChunkKey::new(new_doc.doc_id.clone(), index));
        }
        _ => {
            for g in query.gold.iter().filter(|g| g.doc_id == new_doc.doc_id) {
                let Some(new) = mapping.get(&g.chunk_index) else {
                    return Err(Error::Chunking(format!(
                        "query `{}`: gold chunk {} missing from mapping",
                        query.query_id, g.chunk_index
                    )));
                };
                gold.extend(new.iter().map(|&i| ChunkKey::new(new_doc.doc_id.clone(), i)));
            }
        }
    }
    Ok(Query {
        gold,
        ..query.clone()
    })
}

/// Applies [`subsplit_chunks`] to every document and remaps every query.
pub fn subsplit_corpus(corpus: &Corpus, target_chars: usize) -> Result<Corpus> {
    let mut docs = BTreeMap::new();
    let mut mappings = BTreeMap::new();
    for (id, doc) in &corpus.documents {
        let (new_doc, mapping) = subsplit_chunks(doc, target_chars);
        docs.insert(id.clone(), new_doc);
        mappings.insert(id.clone(), mapping);
    }
    let mut queries = Vec::with_capacity(corpus.queries.len());
    for q in &corpus.queries {
        let mut docs_touched: BTreeSet<&str> = q.gold.iter().map(|g| g.doc_id.as_str()).collect();
        if let Some(a) = &q.answer_span {
            docs_touched.insert(a.doc_id.as_str());
        }
        let mut query = q.clone();
        for doc_id in docs_touched {
            query = remap_gold(&query, &mappings[doc_id], &docs[doc_id])?;
        }
        queries.push(query);
    }
    Corpus::new(docs.into_values().collect(), queries)
}

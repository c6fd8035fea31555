//! From token hidden states to chunk representations.
//!
//! Special tokens (`[DOC]`, `[QRY]`, `[SEP]`) never enter a chunk: pooling
//! only reads each chunk's own token span.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::corpus::Document;
use crate::encoder::{Encoder, TokenSequence, DOC};
use crate::error::{Error, Result};

/// Pooled single-vector chunk representation (unnormalised).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEmbedding {
    pub doc_id: String,
    pub chunk_index: usize,
    pub vector: Array1<f64>,
}

/// Per-token chunk representation; every row has unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTokenSet {
    pub doc_id: String,
    pub chunk_index: usize,
    pub vectors: Array2<f64>,
}

/// Mean of the hidden states over every chunk span.
pub fn mean_pool(h: &Array2<f64>, seq: &TokenSequence) -> Result<Vec<Array1<f64>>> {
    seq.chunk_token_spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            if span.is_empty() {
                return Err(Error::EmptyChunk { chunk_index: i });
            }
            let rows = h.slice(ndarray::s![span.start..span.end, ..]);
            let mut sum = Array1::zeros(h.ncols());
            for row in rows.rows() {
                sum += &row;
            }
            Ok(sum / span.len() as f64)
        })
        .collect()
}

/// Adjoint of [`mean_pool`]: spreads each chunk's gradient over its tokens.
pub fn mean_pool_backward(d_chunks: &[Array1<f64>], seq: &TokenSequence, d_hidden: &mut Array2<f64>) {
    for (g, span) in d_chunks.iter().zip(&seq.chunk_token_spans) {
        let scaled = g / span.len() as f64;
        for t in span.range() {
            let mut row = d_hidden.row_mut(t);
            row += &scaled;
        }
    }
}

fn normalized(row: ArrayView1<f64>, chunk_index: usize) -> Result<Array1<f64>> {
    let norm = row.dot(&row).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::ZeroNorm { chunk_index });
    }
    Ok(&row / norm)
}

/// Unit-normalised hidden states of every chunk span.
pub fn token_groups(h: &Array2<f64>, seq: &TokenSequence) -> Result<Vec<Array2<f64>>> {
    seq.chunk_token_spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            if span.is_empty() {
                return Err(Error::EmptyChunk { chunk_index: i });
            }
            let mut out = Array2::zeros((span.len(), h.ncols()));
            for (mut dst, t) in out.rows_mut().into_iter().zip(span.range()) {
                dst.assign(&normalized(h.row(t), i)?);
            }
            Ok(out)
        })
        .collect()
}

/// Adjoint of [`token_groups`] given the raw hidden states.
pub fn token_groups_backward(
    d_groups: &[Array2<f64>],
    h: &Array2<f64>,
    seq: &TokenSequence,
    d_hidden: &mut Array2<f64>,
) {
    for (g, span) in d_groups.iter().zip(&seq.chunk_token_spans) {
        for (gr, t) in g.rows().into_iter().zip(span.range()) {
            let x = h.row(t);
            let norm = x.dot(&x).sqrt();
            let y = &x / norm;
            let proj = gr.dot(&y);
            let mut row = d_hidden.row_mut(t);
            row.scaled_add(1.0 / norm, &gr);
            row.scaled_add(-proj / norm, &y);
        }
    }
}

/// Late chunking: mean pooling of full-document hidden states per chunk.
pub fn late_chunk_pool(doc_id: &str, h: &Array2<f64>, seq: &TokenSequence) -> Result<Vec<ChunkEmbedding>> {
    Ok(mean_pool(h, seq)?
        .into_iter()
        .enumerate()
        .map(|(chunk_index, vector)| ChunkEmbedding {
            doc_id: doc_id.to_string(),
            chunk_index,
            vector,
        })
        .collect())
}

/// Late-interaction grouping: normalised token states per chunk.
pub fn late_interaction_group(doc_id: &str, h: &Array2<f64>, seq: &TokenSequence) -> Result<Vec<ChunkTokenSet>> {
    Ok(token_groups(h, seq)?
        .into_iter()
        .enumerate()
        .map(|(chunk_index, vectors)| ChunkTokenSet {
            doc_id: doc_id.to_string(),
            chunk_index,
            vectors,
        })
        .collect())
}

/// Full-pass late chunking of a document.
pub fn late_chunk_document(doc: &Document, encoder: &Encoder) -> Result<Vec<ChunkEmbedding>> {
    let seq = encoder.encode_document_sequence(doc)?;
    let h = encoder.forward(&seq)?;
    late_chunk_pool(&doc.doc_id, &h, &seq)
}

/// Full-pass late-interaction encoding of a document.
pub fn late_interaction_document(doc: &Document, encoder: &Encoder) -> Result<Vec<ChunkTokenSet>> {
    let seq = encoder.encode_document_sequence(doc)?;
    let h = encoder.forward(&seq)?;
    late_interaction_group(&doc.doc_id, &h, &seq)
}

/// Every chunk encoded alone as `[DOC] chunk` and mean pooled.
pub fn encode_chunks_independent(doc: &Document, encoder: &Encoder) -> Result<Vec<ChunkEmbedding>> {
    encoder
        .chunk_token_ids(doc)
        .into_iter()
        .enumerate()
        .map(|(chunk_index, toks)| {
            if toks.is_empty() {
                return Err(Error::EmptyChunk { chunk_index });
            }
            let seq = encoder.sequence(DOC, &[toks])?;
            let h = encoder.forward(&seq)?;
            let vector = mean_pool(&h, &seq)?.pop().expect("one span");
            Ok(ChunkEmbedding {
                doc_id: doc.doc_id.clone(),
                chunk_index,
                vector,
            })
        })
        .collect()
}

/// One window of [`plan_windows`]: chunks `start..end` are encoded together
/// and chunks `emit_from..end` take their embedding from this window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub emit_from: usize,
}

/// Lays out chunk-aligned windows over chunks with the given token counts.
///
/// Each window is the longest run of chunks from its start whose sequence
/// (`[DOC]`, chunks and separators) fits in `window_tokens`. The next window
/// starts `overlap_chunks` chunks before the previous end, or later when that
/// would leave no room for a new chunk.
pub fn plan_windows(chunk_lens: &[usize], window_tokens: usize, overlap_chunks: usize) -> Result<Vec<Window>> {
    let n = chunk_lens.len();
    for (i, &len) in chunk_lens.iter().enumerate() {
        if len + 1 > window_tokens {
            return Err(Error::ChunkExceedsWindow {
                chunk_index: i,
                tokens: len + 1,
                window: window_tokens,
            });
        }
    }
    let fits = |start: usize, end: usize| {
        let tokens: usize = chunk_lens[start..end].iter().sum();
        1 + tokens + (end - start).saturating_sub(1) <= window_tokens
    };
    let mut windows = Vec::new();
    let mut start = 0;
    let mut emitted = 0;
    while emitted < n {
        let mut end = start + 1;
        while end < n && fits(start, end + 1) {
            end += 1;
        }
        windows.push(Window {
            start,
            end,
            emit_from: emitted,
        });
        emitted = end;
        if end == n {
            break;
        }
        let mut next = end.saturating_sub(overlap_chunks).max(start + 1);
        while !fits(next, end + 1) {
            next += 1;
        }
        start = next;
    }
    Ok(windows)
}

/// Late chunking over overlapping chunk-aligned windows.
pub fn sliding_window_late_chunk(
    doc: &Document,
    encoder: &Encoder,
    window_tokens: usize,
    overlap_chunks: usize,
) -> Result<Vec<ChunkEmbedding>> {
    let chunks = encoder.chunk_token_ids(doc);
    let lens: Vec<usize> = chunks.iter().map(Vec::len).collect();
    let windows = plan_windows(&lens, window_tokens, overlap_chunks)?;
    let mut out = Vec::with_capacity(chunks.len());
    for w in windows {
        let seq = encoder.sequence(DOC, &chunks[w.start..w.end])?;
        let h = encoder.forward(&seq)?;
        let pooled = mean_pool(&h, &seq).map_err(|e| match e {
            Error::EmptyChunk { chunk_index } => Error::EmptyChunk {
                chunk_index: chunk_index + w.start,
            },
            e => e,
        })?;
        for (offset, vector) in pooled.into_iter().enumerate().skip(w.emit_from - w.start) {
            out.push(ChunkEmbedding {
                doc_id: doc.doc_id.clone(),
                chunk_index: w.start + offset,
                vector,
            });
        }
    }
    Ok(out)
}

/// Mean of the query tokens (the `[QRY]` marker excluded).
pub fn query_vector(h: &Array2<f64>, seq: &TokenSequence) -> Result<Array1<f64>> {
    Ok(mean_pool(h, seq)?.swap_remove(0))
}

/// Normalised query token states (the `[QRY]` marker excluded).
pub fn query_tokens(h: &Array2<f64>, seq: &TokenSequence) -> Result<Array2<f64>> {
    Ok(token_groups(h, seq)?.swap_remove(0))
}

/// Row norms, for diagnostics.
pub fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

//! A small bidirectional transformer encoder with exact gradients.
//!
//! Sequences are built from reserved marker ids and hashed word tokens, run
//! through `layers` post-norm blocks of full self-attention and a GELU FFN,
//! and differentiated with the reverse-mode [`tape`].

pub mod params;
pub mod tape;
pub mod tokenizer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use params::{EncoderConfig, EncoderParams, LayerParams, Positional};
pub use tokenizer::{Tokenizer, DOC, PAD, QRY, SEP};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::par;
use tape::{NodeId, Tape, TapeGrads};

const LN_EPS: f64 = 1e-5;

/// Half-open range of token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Token ids of one encoder input with the position of every chunk's tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub chunk_token_spans: Vec<TokenSpan>,
    pub special_positions: Vec<usize>,
}

impl TokenSequence {
    /// `[prefix] c₀ [SEP] c₁ … [SEP] cₙ`.
    pub fn from_chunk_tokens(prefix: u32, chunks: &[Vec<u32>]) -> Self {
        let total = 1 + chunks.iter().map(Vec::len).sum::<usize>() + chunks.len().saturating_sub(1);
        let mut ids = Vec::with_capacity(total);
        let mut spans = Vec::with_capacity(chunks.len());
        let mut special = vec![0];
        ids.push(prefix);
        for (i, toks) in chunks.iter().enumerate() {
            if i > 0 {
                special.push(ids.len());
                ids.push(SEP);
            }
            let start = ids.len();
            ids.extend_from_slice(toks);
            spans.push(TokenSpan { start, end: ids.len() });
        }
        Self {
            ids,
            chunk_token_spans: spans,
            special_positions: special,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of tokens `chunks` would need as one sequence.
    pub fn required_len(chunks: &[Vec<u32>]) -> usize {
        1 + chunks.iter().map(Vec::len).sum::<usize>() + chunks.len().saturating_sub(1)
    }
}

/// Sinusoidal position table scaled by `scale`.
pub fn sinusoidal_table(len: usize, dim: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        scale * if j % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Recorded forward computation of one sequence.
pub struct ForwardPass {
    tape: Tape,
    output: NodeId,
}

impl ForwardPass {
    pub fn hidden(&self) -> &Array2<f64> {
        self.tape.value(self.output)
    }

    pub fn into_hidden(self) -> Array2<f64> {
        self.tape.into_value(self.output)
    }

    /// Back-propagates `d_hidden` (same shape as the hidden states).
    pub fn backward(&self, d_hidden: Array2<f64>) -> TapeGrads {
        self.tape.backward(vec![(self.output, d_hidden)])
    }
}

/// Configuration plus parameters: everything needed to embed text.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let shapes_ok = params.embedding.dim() == (config.vocab_size as usize, d)
            && params.layers.len() == config.layers
            && params.layers.iter().all(|l| {
                l.wq.dim() == (d, d) && l.ffn_in.dim() == (d, config.ffn_dim()) && l.ffn_out.dim() == (config.ffn_dim(), d)
            });
        if !shapes_ok {
            return Err(Error::InvalidConfig("parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.config.vocab_size, self.config.lowercase)
    }

    pub fn chunk_token_ids(&self, doc: &Document) -> Vec<Vec<u32>> {
        let tok = self.tokenizer();
        doc.chunk_texts().into_iter().map(|t| tok.encode(t)).collect()
    }

    fn check_len(&self, required: usize) -> Result<()> {
        if required > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                required,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Builds a length-checked sequence from pre-tokenized chunks.
    pub fn sequence(&self, prefix: u32, chunks: &[Vec<u32>]) -> Result<TokenSequence> {
        self.check_len(TokenSequence::required_len(chunks))?;
        Ok(TokenSequence::from_chunk_tokens(prefix, chunks))
    }

    /// `[DOC] c₁ [SEP] c₂ … [SEP] c_N` for the whole document.
    pub fn encode_document_sequence(&self, doc: &Document) -> Result<TokenSequence> {
        self.sequence(DOC, &self.chunk_token_ids(doc))
    }

    /// `[QRY] q`, with one span over the query tokens.
    pub fn encode_query_sequence(&self, text: &str) -> Result<TokenSequence> {
        self.sequence(QRY, &[self.tokenizer().encode(text)])
    }

    /// Records the forward computation of `seq`.
    pub fn forward_pass(&self, seq: &TokenSequence) -> Result<ForwardPass> {
        self.check_len(seq.len())?;
        let cfg = &self.config;
        let p = &self.params;
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::InvalidConfig(format!("token id {bad} outside vocabulary")));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let mut tape = Tape::new();
        let mut x = tape.gather(0, &p.embedding, &ids);
        if cfg.positional == Positional::Sinusoidal {
            let pe = tape.constant(sinusoidal_table(ids.len(), cfg.dim, cfg.positional_scale));
            x = tape.add(x, pe);
        }
        let dh = cfg.head_dim();
        let alpha = 1.0 / (dh as f64).sqrt();
        for (l, layer) in p.layers.iter().enumerate() {
            let idx = |slot| EncoderParams::layer_index(l, slot);
            let wq = tape.param(idx(0), &layer.wq);
            let wk = tape.param(idx(1), &layer.wk);
            let wv = tape.param(idx(2), &layer.wv);
            let wo = tape.param(idx(3), &layer.wo);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let heads: Vec<NodeId> = (0..cfg.heads)
                .map(|h| {
                    let qh = tape.columns(q, h * dh, dh);
                    let kh = tape.columns(k, h * dh, dh);
                    let vh = tape.columns(v, h * dh, dh);
                    let scores = tape.matmul_bt(qh, kh, alpha);
                    let attn = tape.softmax_rows(scores);
                    tape.matmul(attn, vh)
                })
                .collect();
            let attended = if heads.len() == 1 { heads[0] } else { tape.concat_columns(&heads) };
            let projected = tape.matmul(attended, wo);
            let residual = tape.add(x, projected);
            let g1 = tape.param(idx(4), &layer.ln1_gain);
            let b1 = tape.param(idx(5), &layer.ln1_bias);
            let x1 = tape.layer_norm(residual, g1, b1, LN_EPS);
            let w_in = tape.param(idx(6), &layer.ffn_in);
            let w_out = tape.param(idx(7), &layer.ffn_out);
            let hidden = tape.matmul(x1, w_in);
            let act = tape.gelu(hidden);
            let ffn = tape.matmul(act, w_out);
            let residual = tape.add(x1, ffn);
            let g2 = tape.param(idx(8), &layer.ln2_gain);
            let b2 = tape.param(idx(9), &layer.ln2_bias);
            x = tape.layer_norm(residual, g2, b2, LN_EPS);
        }
        if !tape.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("hidden states".into()));
        }
        Ok(ForwardPass { tape, output: x })
    }

    /// Hidden states `T × d` for `seq`.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        Ok(self.forward_pass(seq)?.into_hidden())
    }

    /// Forward passes for many sequences (in parallel when enabled).
    pub fn forward_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<Array2<f64>>> {
        par::try_map(seqs, |s| self.forward(s))
    }

    /// Gradient of a scalar loss over the hidden states of `seqs`.
    ///
    /// `loss` receives the hidden states in input order and returns the loss
    /// value with `dL/dH` for every sequence. Per-sequence gradients are summed
    /// in input order.
    pub fn gradient<F>(&self, seqs: &[TokenSequence], loss: F) -> Result<(f64, EncoderParams)>
    where
        F: FnOnce(&[&Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)>,
    {
        let passes = par::try_map(seqs, |s| self.forward_pass(s))?;
        let hidden: Vec<&Array2<f64>> = passes.iter().map(ForwardPass::hidden).collect();
        let (value, d_hidden) = loss(&hidden)?;
        if d_hidden.len() != passes.len() {
            return Err(Error::InvalidConfig("loss returned wrong number of adjoints".into()));
        }
        let work: Vec<(&ForwardPass, Array2<f64>)> = passes.iter().zip(d_hidden).collect();
        let per_seq = par::map(&work, |(pass, dh)| pass.backward(dh.clone()));
        let mut grads = self.params.zeros_like();
        for tg in per_seq {
            accumulate_tape_grads(&mut grads, tg);
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((value, grads))
    }
}

pub(crate) fn accumulate_tape_grads(grads: &mut EncoderParams, tg: TapeGrads) {
    {
        let mut tensors = grads.tensors_mut();
        for (index, g) in tg.dense {
            *tensors[index] += &g;
        }
    }
    for (table, row, g) in tg.rows {
        debug_assert_eq!(table, 0);
        let mut r = grads.embedding.row_mut(row);
        for (a, b) in r.iter_mut().zip(g) {
            *a += b;
        }
    }
}

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::fnv1a64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub positional: Positional,
    /// Amplitude of the sinusoidal table relative to unit sinusoids.
    pub positional_scale: f64,
    pub vocab_size: u32,
    pub lowercase: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
            max_seq_len: 2048,
            positional: Positional::Sinusoidal,
            positional_scale: 0.02,
            vocab_size: 4096,
            lowercase: true,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim == 0 || self.heads == 0 {
            return bad("dim and heads must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if self.vocab_size <= super::tokenizer::NUM_RESERVED {
            return bad("vocab_size must exceed the reserved ids");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub ffn_in: Array2<f64>,
    pub ffn_out: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
}

pub const TENSORS_PER_LAYER: usize = 10;
pub const LAYER_TENSOR_NAMES: [&str; TENSORS_PER_LAYER] = [
    "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ffn_in", "ffn_out", "ln2_gain", "ln2_bias",
];

impl LayerParams {
    fn tensors(&self) -> [&Array2<f64>; TENSORS_PER_LAYER] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn_in,
            &self.ffn_out,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; TENSORS_PER_LAYER] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ffn_in,
            &mut self.ffn_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// All trainable tensors. The flat order used by [`EncoderParams::tensors`] is
/// the embedding table followed by each layer's tensors in
/// [`LAYER_TENSOR_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Deterministic initialisation from `config.seed`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let mut draw = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng));
        let (d, f) = (config.dim, config.ffn_dim());
        let embedding = draw(config.vocab_size as usize, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                ffn_in: draw(d, f),
                ffn_out: draw(f, d),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
            })
            .collect();
        Ok(Self { embedding, layers })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out
    }

    /// Flat index of a layer tensor.
    pub fn layer_index(layer: usize, slot: usize) -> usize {
        1 + layer * TENSORS_PER_LAYER + slot
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the bit patterns of every scalar, as 16 hex digits.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        for t in self.tensors() {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        format!("{:016x}", fnv1a64(&bytes))
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            *t *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

//! File configuration shared by every subcommand. Flags override it.

use std::path::Path;

use anyhow::{Context, Result};
use ctxembed::chunking::ChunkerConfig;
use ctxembed::encoder::{EncoderConfig, Tokenizer};
use ctxembed::synthgen::SynthConfig;
use ctxembed::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub chunker: ChunkerConfig,
    pub index: IndexSettings,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    pub window_tokens: usize,
    pub overlap_chunks: usize,
}

impl Default for IndexSettings {
    fn default() -> Self {
        Self {
            window_tokens: 512,
            overlap_chunks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub sizes: Vec<usize>,
    pub doc_counts: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            sizes: vec![800, 400, 200, 100],
            doc_counts: vec![25, 50, 100, 200],
            lambdas: vec![0.0, 0.1, 0.5, 1.0],
            seed: 0,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("config: reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("config: parsing {}", path.display()))
    }

    /// Tokenizer of the configured encoder, for lexical indices.
    pub fn encoder_tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.encoder.vocab_size, self.encoder.lowercase)
    }
}

/// Prints the resolved settings of a command to stderr as TOML.
pub fn echo<T: Serialize>(command: &str, resolved: &T) -> Result<()> {
    let body = toml::to_string(resolved).context("config: serializing resolved config")?;
    eprintln!("# resolved config for `{command}`\n{body}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = toml::from_str("[train]\nlr = 0.001\n[train.loss]\nlambda_seq = 0.5\n").unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.loss.lambda_seq, 0.5);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn full_config_round_trips() {
        let cfg = FileConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<FileConfig>(&text).unwrap(), cfg);
    }
}

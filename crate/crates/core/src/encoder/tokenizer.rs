//! Whitespace/punctuation tokenizer with hashed vocabulary ids.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const QRY: u32 = 2;
pub const DOC: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: u32,
    pub lowercase: bool,
}

impl Tokenizer {
    pub fn new(vocab_size: u32, lowercase: bool) -> Self {
        assert!(vocab_size > NUM_RESERVED, "vocabulary must exceed the reserved ids");
        Self { vocab_size, lowercase }
    }

    pub fn hash_vocab_size(&self) -> u32 {
        self.vocab_size - NUM_RESERVED
    }

    /// Splits on Unicode whitespace; every non-alphanumeric character becomes
    /// its own token.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut current = String::new();
        for ch in text.chars() {
            if ch.is_whitespace() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            } else if ch.is_alphanumeric() {
                if self.lowercase {
                    current.extend(ch.to_lowercase());
                } else {
                    current.push(ch);
                }
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
        tokens
    }

    pub fn token_id(&self, token: &str) -> u32 {
        let bucket = fnv1a64(token.as_bytes()) % u64::from(self.hash_vocab_size());
        NUM_RESERVED + bucket as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenize(text).iter().map(|t| self.token_id(t)).collect()
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(4096, true)
    }
}

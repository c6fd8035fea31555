use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. Messages are prefixed with the module that
/// produced them so the CLI can surface them unchanged.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus: {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus: duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("corpus: document `{doc_id}`: {reason}")]
    InvalidDocument { doc_id: String, reason: String },

    #[error("corpus: query `{query_id}`: {reason}")]
    InvalidQuery { query_id: String, reason: String },

    #[error("corpus: query `{query_id}` references missing chunk ({doc_id}, {chunk_index})")]
    DanglingGold {
        query_id: String,
        doc_id: String,
        chunk_index: usize,
    },

    #[error("chunking: {0}")]
    Chunking(String),

    #[error("encoder: sequence too long: {required} tokens required, max_seq_len is {max}")]
    SequenceTooLong { required: usize, max: usize },

    #[error("encoder: invalid config: {0}")]
    InvalidConfig(String),

    #[error("encoder: non-finite value in {0}")]
    NonFinite(String),

    #[error("encoder: checkpoint: {0}")]
    Checkpoint(String),

    #[error("pooling: chunk {chunk_index} has no tokens")]
    EmptyChunk { chunk_index: usize },

    #[error("pooling: zero-norm token state in chunk {chunk_index}")]
    ZeroNorm { chunk_index: usize },

    #[error("pooling: chunk {chunk_index} needs {tokens} tokens, window holds {window}")]
    ChunkExceedsWindow {
        chunk_index: usize,
        tokens: usize,
        window: usize,
    },

    #[error("loss: {0}")]
    Loss(String),

    #[error("trainer: {0}")]
    Trainer(String),

    #[error("trainer: diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("evalbench: {0}")]
    Eval(String),

    #[error("synthgen: {0}")]
    Synth(String),

    #[error("document `{doc_id}`: {source}")]
    InDocument {
        doc_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_document(doc_id: &str, source: Error) -> Self {
        Error::InDocument {
            doc_id: doc_id.to_string(),
            source: Box::new(source),
        }
    }
}

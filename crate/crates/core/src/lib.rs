//! Context-aware chunk embeddings.
//!
//! The crate bundles everything needed to study chunk retrieval when a chunk
//! only makes sense in the light of its surrounding document:
//!
//! - [`corpus`]: documents, chunks, queries and their JSONL storage.
//! - [`chunking`]: recursive character splitting and controlled re-chunking.
//! - [`encoder`]: a small bidirectional transformer with exact reverse-mode gradients.
//! - [`pooling`]: independent encoding, late chunking, late-interaction grouping
//!   and sliding-window late chunking.
//! - [`loss`]: the weighted in-sequence / in-batch InfoNCE objective.
//! - [`trainer`]: batch construction, AdamW and the cosine schedule.
//! - [`retrieval`]: exhaustive dense, multi-vector and BM25 search.
//! - [`evalbench`]: nDCG / recall and the sweep harnesses.
//! - [`synthgen`]: generator of controlled corpora where later chunks lose their subject.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Reductions are
//! always performed in input order, so results do not depend on the thread count.

pub mod chunking;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod loss;
pub mod par;
pub mod persist;
pub mod pooling;
pub mod retrieval;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

//! Multi-stage legal retrieval and entailment engine.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: ingestion and cleaning of case, statute and tort corpora
//! - [`lexical`]: tokenization, inverted index and BM25 ranking
//! - [`embedding`]: vector stores, similarity search and the embedding client
//! - [`fusion`]: score tables, normalization, weighted ensembles and voting
//! - [`llm`]: prompt templates, chat client and answer extraction
//! - [`judgment`]: tort prediction and rationale post-processing heuristics
//! - [`eval`]: retrieval and classification metrics
//! - [`pipeline`]: declarative run configs and stage orchestration
//!
//! Batch work (per-query scoring, lattice sweeps) runs on rayon when the
//! `parallel` feature is enabled, and sequentially otherwise. See [`exec`].

pub mod cache;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod http;
pub mod judgment;
pub mod lexical;
pub mod llm;
pub mod mock;
pub mod pipeline;

pub use error::{Error, Result};
pub use exec::Exec;
pub use fusion::{RankedList, ScoreTable, WeightVector};
pub use corpus::Qrels;

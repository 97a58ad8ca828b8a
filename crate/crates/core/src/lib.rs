//! Retrieval-augmented generate/review engine for radiology report impressions.
//!
//! The pipeline runs each case through exemplar retrieval over a vector
//! index, an impression-writing agent, and a consistency-reviewing agent in
//! a bounded revise loop, then scores the output with n-gram metrics, an
//! embedding-based score, and an LLM judge.

pub mod agents;
pub mod chat;
pub mod config;
pub mod inconsistency;
pub mod judge;
pub mod metrics;
pub mod orchestrator;
pub mod pipeline;
pub mod report;
pub mod retrieval;

pub use chat::{ChatBackend, ChatMessage, Role};
pub use orchestrator::{run_batch, run_case, SessionConfig, SessionResult};
pub use report::{Corpus, RadiologyReport};
pub use retrieval::{EmbeddingBackend, EmbeddingVector, VectorIndex};

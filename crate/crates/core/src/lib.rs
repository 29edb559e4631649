//! In-context curriculum learning harness.
//!
//! Demonstrations are scored by how hard their gold label is for a model
//! (label perplexity under the model's own instruction template), ordered
//! easy-to-hard, rendered into model-specific prompts and evaluated against
//! any logprob-capable endpoint or a deterministic offline mock.
//!
//! The numeric modules are generic over [`Scalar`]; the aliases below fix
//! them to `f64`, which is what the runner and the CLI use.

pub mod corpus;
pub mod curriculum;
pub mod difficulty;
pub mod evaluation;
pub mod gateway;
pub mod hash;
pub mod jsonl;
pub mod num;
pub mod promptkit;
pub mod retrieval;
pub mod runner;

pub use num::Scalar;

pub use corpus::{Demonstration, Label, TaskKind, TaskSpec};
pub use gateway::{BackendConfig, BackendKind, Gateway, LmBackend, TokenScore};
pub use promptkit::{RenderedPrompt, TemplateFamily, TemplateKind};

/// Embedding vector with `f64` entries, as returned by every backend.
pub type Embedding = retrieval::EmbeddingVector<f64>;
/// Retrieved candidates with `f64` similarities.
pub type CandidateSet = retrieval::CandidateSet<f64>;
/// Difficulty of one demonstration in `f64`.
pub type DifficultyScore = difficulty::DifficultyScore<f64>;
/// Aggregated expert ranking in `f64`.
pub type AggregateRanking = difficulty::AggregateRanking<f64>;
/// A demonstration order with `f64` provenance values.
pub type OrderPlan = curriculum::OrderPlan<f64>;
/// Per-run metrics in `f64`.
pub type MetricReport = evaluation::MetricReport<f64>;
/// Multi-seed aggregate in `f64`.
pub type AggregateReport = evaluation::AggregateReport<f64>;

//! Two-round text-to-SQL over Spider-format benchmarks.
//!
//! Round one renders a reference-enhanced prompt (instruction with an
//! optimization rule, sampled cell values, foreign keys) prefixed with
//! retrieved demonstrations and asks one model for a preliminary query. The
//! tables that query references become the schema-linking result, the prompt
//! is pruned to them, and round two fans the pruned prompt out to several
//! models. Their executed results vote, optionally restricted per difficulty
//! grade.
//!
//! Module map:
//!
//! - [`catalog`]: Spider manifests, SQLite files, cell-value sampling.
//! - [`prompting`]: prompt documents, rendering and pruning.
//! - [`retrieval`]: question skeletons and the demonstration pool.
//! - [`gateway`]: model specs, OpenAI-compatible and mock backends.
//! - [`sqlanalysis`]: SQL extraction, table linking, hardness grading.
//! - [`execution`]: read-only execution with timeouts, result equivalence.
//! - [`consistency`]: naive and difficulty-aware voting.
//! - [`evaluation`]: execution accuracy, table recall, prompt statistics.
//! - [`pipeline`]: run configuration, per-question orchestration, resumable runs.

pub mod catalog;
pub mod consistency;
pub mod evaluation;
pub mod execution;
pub mod gateway;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod sqlanalysis;

pub use catalog::{DatabaseCatalog, DbSchema, TableSchema};
pub use consistency::{RoutingTable, VoteDecision};
pub use execution::{ExecutionOutcome, ResultKey};
pub use pipeline::{Pipeline, RunConfig, Stage};
pub use prompting::{PromptDoc, PromptFlags};
pub use sqlanalysis::{DifficultyGrade, SqlCandidate};

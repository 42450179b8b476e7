//! Prompt construction and evaluation harness for cross-lingual in-context
//! learning.
//!
//! A run takes labeled source-language examples, selects demonstrations for
//! each target-language test input (randomly, by embedding similarity, or by
//! dissimilarity), optionally appends a task aligner that spells out the
//! target language and its label verbalizations, and asks a pluggable scorer
//! for the most likely label. Results are aggregated into macro-F1 tables.
//!
//! Module map:
//!
//! * [`corpus`]: datasets, language codes, label spaces, seeded sampling.
//! * [`embedding`]: sentence embedders, the exact cosine index, index files.
//! * [`aligner`]: the aligner catalog, its ablation variants, span-fill aligners.
//! * [`prompt`]: verbalizers, context assembly, prompt plans, token budgets.
//! * [`inference`]: scorers (HTTP, mock, replay cache) and argmax prediction.
//! * [`eval`]: macro-F1, the experiment grid, report rendering.

pub mod aligner;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod inference;
pub mod prompt;
pub mod synthetic;
mod transport;

pub use error::{Error, Result};
pub use transport::EndpointConfig;

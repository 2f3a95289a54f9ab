//! Core data handling for classifying drug involvement from free-text
//! cause-of-death statements.
//!
//! - [`record`]: death-certificate records and tabular ingestion
//! - [`schema`]: the ordered drug-class taxonomy and label vectors
//! - [`text`]: lowercasing and stop-word removal
//! - [`labels`], [`grouping`], [`lint`], [`split`]: gold labels, rare-substance
//!   grouping, label consistency checks and deterministic partitions
//! - [`embed`]: static word-vector and concept-identifier document vectors
//! - [`metrics`]: F1, AUROC, average precision, Hamming loss, subset accuracy
//!   and bootstrap confidence intervals
//! - [`error_analysis`]: per-class FP/FN tables

pub mod embed;
pub mod error;
pub mod error_analysis;
pub mod grouping;
pub mod labels;
pub mod lint;
pub mod metrics;
pub mod record;
pub mod schema;
pub mod split;
pub mod synth;
pub mod text;

pub use error::{CoreError, Result};
pub use labels::LabeledCase;
pub use record::DeathRecord;
pub use schema::{LabelSchema, LabelVector};

//! Encoder fine-tuning for multi-label drug classification.
//!
//! A small self-contained BERT implementation ([`bert`]) over a reverse-mode
//! tape ([`tape`]) loads pretrained checkpoints in the common
//! `config.json` + `vocab.txt` + `model.safetensors` layout, fine-tunes them
//! with a sigmoid head ([`finetune`]), produces contextual document vectors
//! ([`embed`]) and integrated-gradients token attributions ([`explain`]).

pub mod bert;
pub mod embed;
pub mod error;
pub mod explain;
pub mod finetune;
pub mod model;
pub mod safetensors;
pub mod tape;
pub mod wordpiece;

pub use embed::ContextualEmbedder;
pub use error::{EncoderError, Result};
pub use explain::{attribute_tokens, render_attribution_report, AttributionMap, ReportFormat, DEFAULT_STEPS};
pub use finetune::{
    finetune_encoder, predict_probabilities, predict_probabilities_timed, repair_implications, threshold_labels,
    EpochLog, FineTuneConfig, FineTuneOutcome, Throughput,
};
pub use model::{EncoderClassifier, ModelRepository, PretrainedEncoder};

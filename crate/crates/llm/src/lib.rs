//! Generative-model harness: k-shot prompts, answer parsing, batch
//! evaluation through an external generation server, and an SFT driver.
//!
//! Weights never load in-process. Everything model-side goes through
//! [`GenerationClient`] and [`SftClient`].

pub mod answer;
pub mod client;
pub mod error;
pub mod evaluate;
pub mod prompt;
pub mod sft;

pub use answer::{parse_answer, render_answer, ParseStatus, ParsedAnswer};
pub use client::{FnClient, GenerationClient, GenerationRequest, HttpClient, HttpConfig, SftClient, SftExample};
pub use error::{LlmError, Result};
pub use evaluate::{evaluate_generations, EvalOptions, GenerationRecord, GenerationRun, ParseStats};
pub use prompt::{build_prompt, query_text, ExemplarPool, PromptSpec, SUPPORTED_SHOTS};
pub use sft::{run_sft, sft_examples, SftConfig, SftOutcome};

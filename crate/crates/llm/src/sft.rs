//! Supervised fine-tuning driver: stream prompt/answer pairs until the
//! running loss drops below a threshold or the example budget runs out.

use codtox_core::{LabelSchema, LabeledCase};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::render_answer;
use crate::client::{SftClient, SftExample};
use crate::error::{LlmError, Result};
use crate::prompt::{build_prompt, ExemplarPool, PromptSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub loss_threshold: f64,
    pub max_examples: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Number of recent step losses averaged into the running loss.
    pub loss_window: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            loss_threshold: 0.005,
            max_examples: 2000,
            seed: 0,
            batch_size: 1,
            loss_window: 1,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_threshold > 0.0) {
            return Err(LlmError::Config("loss_threshold must be positive".into()));
        }
        if self.max_examples == 0 || self.batch_size == 0 || self.loss_window == 0 {
            return Err(LlmError::Config("max_examples, batch_size and loss_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftOutcome {
    pub model_handle: String,
    pub examples_consumed: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub losses: Vec<f64>,
}

/// Zero-shot prompts paired with canonical answers, in seeded order.
pub fn sft_examples(train: &[LabeledCase], schema: &LabelSchema, seed: u64) -> Result<Vec<SftExample>> {
    let spec = PromptSpec::default();
    let empty = ExemplarPool::default();
    let mut out: Vec<SftExample> = train
        .iter()
        .map(|c| {
            Ok(SftExample {
                prompt: build_prompt(None, &c.normalized_text, &spec, &empty, schema)?,
                target: render_answer(&c.gold, schema),
            })
        })
        .collect::<Result<_>>()?;
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

pub fn run_sft(client: &mut dyn SftClient, examples: &[SftExample], config: &SftConfig) -> Result<SftOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(LlmError::Config("no SFT examples".into()));
    }
    let budget = config.max_examples.min(examples.len());
    let mut consumed = 0;
    let mut losses = Vec::new();
    let mut running = f64::INFINITY;
    let mut converged = false;
    while consumed < budget {
        let end = (consumed + config.batch_size).min(budget);
        let loss = client.train_step(&examples[consumed..end])?;
        consumed = end;
        losses.push(loss);
        let w = &losses[losses.len().saturating_sub(config.loss_window)..];
        running = w.iter().sum::<f64>() / w.len() as f64;
        if running < config.loss_threshold {
            converged = true;
            break;
        }
    }
    if converged {
        tracing::info!(consumed, loss = running, "SFT loss below threshold");
    } else {
        tracing::warn!(
            consumed,
            loss = running,
            threshold = config.loss_threshold,
            "SFT budget exhausted before loss fell below threshold"
        );
    }
    let model_handle = client.finalize()?;
    Ok(SftOutcome { model_handle, examples_consumed: consumed, final_loss: running, converged, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        loss: Box<dyn FnMut(usize) -> f64>,
        seen: usize,
    }

    impl SftClient for Scripted {
        fn train_step(&mut self, batch: &[SftExample]) -> Result<f64> {
            self.seen += batch.len();
            Ok((self.loss)(self.seen))
        }
        fn finalize(&mut self) -> Result<String> {
            Ok(format!("sft-{}", self.seen))
        }
    }

    fn examples(n: usize) -> Vec<SftExample> {
        (0..n).map(|i| SftExample { prompt: format!("p{i}"), target: "none".into() }).collect()
    }

    #[test]
    fn stops_when_loss_crosses_threshold() {
        let mut c = Scripted { loss: Box::new(|n| if n >= 1400 { 0.004 } else { 0.5 }), seen: 0 };
        let out = run_sft(&mut c, &examples(5000), &SftConfig::default()).unwrap();
        assert_eq!(out.examples_consumed, 1400);
        assert!(out.converged);
        assert_eq!(out.final_loss, 0.004);
        assert_eq!(out.model_handle, "sft-1400");
    }

    #[test]
    fn budget_exhaustion_is_not_an_error() {
        let mut c = Scripted { loss: Box::new(|_| 0.7), seen: 0 };
        let out = run_sft(&mut c, &examples(5000), &SftConfig::default()).unwrap();
        assert_eq!(out.examples_consumed, 2000);
        assert!(!out.converged);
        let mut c = Scripted { loss: Box::new(|_| 0.7), seen: 0 };
        let short = run_sft(&mut c, &examples(300), &SftConfig { batch_size: 7, ..Default::default() }).unwrap();
        assert_eq!(short.examples_consumed, 300);
    }

    #[test]
    fn threshold_is_strict_and_windowed() {
        let mut c = Scripted { loss: Box::new(|n| if n % 2 == 0 { 0.0 } else { 0.005 }), seen: 0 };
        let cfg = SftConfig { loss_window: 2, ..Default::default() };
        let out = run_sft(&mut c, &examples(10), &cfg).unwrap();
        // window [0.005, 0.0] averages 0.0025 at example 2
        assert_eq!(out.examples_consumed, 2);
        let mut c = Scripted { loss: Box::new(|_| 0.005), seen: 0 };
        assert!(!run_sft(&mut c, &examples(10), &SftConfig::default()).unwrap().converged);
    }

    #[test]
    fn examples_are_zero_shot_and_seeded() {
        use codtox_core::synth::{generate_cases, SynthConfig};
        let schema = LabelSchema::default();
        let cases = generate_cases(&SynthConfig { n_cases: 30, seed: 2, ..Default::default() }, &Default::default()).unwrap();
        let a = sft_examples(&cases, &schema, 5).unwrap();
        assert_eq!(a, sft_examples(&cases, &schema, 5).unwrap());
        assert_ne!(a, sft_examples(&cases, &schema, 6).unwrap());
        assert!(a.iter().all(|e| !e.prompt.contains(crate::prompt::EXAMPLE_DELIMITER)));
    }
}

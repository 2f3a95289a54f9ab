//! Batch generation over a test split, parsing and scoring.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use codtox_core::metrics::{evaluate, BootstrapConfig, DatasetTag, EvalData, MetricReport};
use codtox_core::schema::label_matrix;
use codtox_core::{LabelSchema, LabelVector, LabeledCase};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer::{parse_answer, ParseStatus};
use crate::client::{GenerationClient, GenerationRequest};
use crate::error::{LlmError, Result};
use crate::prompt::{build_prompt, ExemplarPool, PromptSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// In-flight request cap.
    pub concurrency: usize,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub dataset: DatasetTag,
    pub bootstrap: BootstrapConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            concurrency: 4,
            max_retries: 3,
            backoff_ms: 200,
            dataset: DatasetTag::InternalTest,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub case_id: String,
    pub prompt_sha256: String,
    pub raw: String,
    pub parsed: Vec<u8>,
    pub status: ParseStatus,
    pub attempts: usize,
    /// Last transport error when every attempt failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseStats {
    pub total: usize,
    pub ok: usize,
    pub repaired: usize,
    pub failed: usize,
    pub transport_failures: usize,
}

impl ParseStats {
    pub fn ok_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ok as f64 / self.total as f64
        }
    }
}

pub struct GenerationRun {
    pub predictions: Vec<LabelVector>,
    pub records: Vec<GenerationRecord>,
    pub report: MetricReport,
    pub stats: ParseStats,
    pub seconds: f64,
}

impl GenerationRun {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| LlmError::io(path, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").map_err(|e| LlmError::io(path, e))?;
        }
        f.flush().map_err(|e| LlmError::io(path, e))
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn generate_with_retry(
    client: &dyn GenerationClient,
    request: &GenerationRequest,
    options: &EvalOptions,
) -> (std::result::Result<String, String>, usize) {
    let mut last = String::new();
    for attempt in 0..=options.max_retries {
        match client.generate(request) {
            Ok(text) => return (Ok(text), attempt + 1),
            Err(e) => {
                last = e.to_string();
                if attempt < options.max_retries {
                    let wait = options.backoff_ms.saturating_mul(1 << attempt.min(16));
                    tracing::debug!(attempt, wait_ms = wait, error = %last, "retrying generation");
                    std::thread::sleep(Duration::from_millis(wait));
                }
            }
        }
    }
    (Err(last), options.max_retries + 1)
}

/// One request per case, parsed into label vectors and scored; failed parses
/// and transport failures count as all-negative predictions.
pub fn evaluate_generations(
    client: &dyn GenerationClient,
    cases: &[LabeledCase],
    spec: &PromptSpec,
    pool: &ExemplarPool,
    schema: &LabelSchema,
    options: &EvalOptions,
) -> Result<GenerationRun> {
    spec.validate()?;
    if options.concurrency == 0 {
        return Err(LlmError::Config("concurrency must be positive".into()));
    }
    let ids: Vec<String> = cases.iter().map(LabeledCase::key).collect();
    pool.check_disjoint(ids.iter().map(String::as_str))?;
    let prompts: Vec<String> = cases
        .iter()
        .zip(&ids)
        .map(|(c, id)| build_prompt(Some(id), &c.normalized_text, spec, pool, schema))
        .collect::<Result<_>>()?;

    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<GenerationRecord>>> = Mutex::new(vec![None; cases.len()]);
    let workers = options.concurrency.min(cases.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cases.len() {
                    break;
                }
                let request = GenerationRequest {
                    prompt: prompts[i].clone(),
                    max_tokens: spec.max_tokens,
                    temperature: spec.temperature,
                };
                let (result, attempts) = generate_with_retry(client, &request, options);
                let (raw, error) = match result {
                    Ok(t) => (t, None),
                    Err(e) => {
                        tracing::warn!(case = %ids[i], error = %e, "generation failed after retries");
                        (String::new(), Some(e))
                    }
                };
                let parsed = parse_answer(&raw, schema);
                if parsed.status == ParseStatus::Failed {
                    tracing::debug!(case = %ids[i], raw = %raw, "unparseable answer");
                }
                let record = GenerationRecord {
                    case_id: ids[i].clone(),
                    prompt_sha256: prompt_hash(&prompts[i]),
                    raw,
                    parsed: parsed.labels.bits().to_vec(),
                    status: parsed.status,
                    attempts,
                    error,
                };
                slots.lock().expect("collector poisoned")[i] = Some(record);
            });
        }
    });
    let records: Vec<GenerationRecord> = slots
        .into_inner()
        .expect("collector poisoned")
        .into_iter()
        .map(|r| r.expect("every case processed"))
        .collect();

    let mut stats = ParseStats { total: records.len(), ..Default::default() };
    for r in &records {
        match r.status {
            ParseStatus::Ok => stats.ok += 1,
            ParseStatus::Repaired => stats.repaired += 1,
            ParseStatus::Failed => stats.failed += 1,
        }
        stats.transport_failures += usize::from(r.error.is_some());
    }
    let predictions: Vec<LabelVector> = records
        .iter()
        .map(|r| LabelVector::new(r.parsed.clone()))
        .collect::<codtox_core::Result<_>>()?;
    let gold: Vec<LabelVector> = cases.iter().map(|c| c.gold.clone()).collect();
    let width = schema.len();
    let data = EvalData::new(label_matrix(&predictions, width)?, label_matrix(&gold, width)?, None)?;
    let model = format!("{}/{}-shot", client.model_id(), spec.k);
    let mut report = evaluate(&model, options.dataset, schema, &data, &options.bootstrap)?;
    report.notes.push(format!(
        "parse ok {} repaired {} failed {} (failed scored as all-negative); transport failures {}",
        stats.ok, stats.repaired, stats.failed, stats.transport_failures
    ));
    let seconds = started.elapsed().as_secs_f64();
    tracing::info!(model, n = stats.total, ok_rate = stats.ok_rate(), seconds, "generation run");
    Ok(GenerationRun { predictions, records, report, stats, seconds })
}

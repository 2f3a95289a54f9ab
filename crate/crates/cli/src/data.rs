//! Dataset loading, the case cache and prediction input.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use codtox_core::labels::{label_cases, load_gold_labels};
use codtox_core::lint::{lint_labels, LintReport};
use codtox_core::record::{ingest_records, SchemaMap, TextFields};
use codtox_core::synth::{generate_cases, SynthConfig};
use codtox_core::text::{normalize_text, StopList};
use codtox_core::{LabelSchema, LabeledCase};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, TextConfig};
use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub input_rows: usize,
    pub retained: usize,
    pub excluded: BTreeMap<String, usize>,
    pub lint: LintReport,
    pub schema_sha256: String,
}

pub fn stop_list(text: &TextConfig) -> Result<StopList> {
    match &text.stop_list {
        Some(p) => Ok(StopList::load(p)?),
        None => Ok(StopList::default()),
    }
}

/// Reads and labels a dataset. Duplicate case keys are a data error.
pub fn load_dataset(
    cfg: &DatasetConfig,
    schema: &LabelSchema,
    text: &TextConfig,
) -> Result<(Vec<LabeledCase>, IngestSummary)> {
    let stops = stop_list(text)?;
    let (cases, input_rows, excluded) = match cfg {
        DatasetConfig::Files { records, gold, schema_map } => {
            let (recs, report) = ingest_records(records, schema_map)?;
            let gold = load_gold_labels(gold, schema)?;
            let cases = label_cases(recs, &gold, &stops, text.fields)?;
            (cases, report.input_rows, report.by_reason())
        }
        DatasetConfig::Synthetic { n_cases, seed, id_prefix } => {
            let mut cases = generate_cases(&SynthConfig { n_cases: *n_cases, seed: *seed, ..Default::default() }, &stops)?;
            for c in &mut cases {
                c.record.case_id = format!("{id_prefix}{}", c.record.case_id);
                if text.fields != TextFields::default() {
                    c.normalized_text = normalize_text(&text.fields.text_of(&c.record), &stops);
                }
            }
            (cases, *n_cases, BTreeMap::new())
        }
    };
    if cases.iter().any(|c| c.gold.len() != schema.len()) {
        return Err(AppError::Data("gold label width differs from the schema".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in &cases {
        if !seen.insert(c.key()) {
            return Err(AppError::Data(format!("duplicate case key `{}`", c.key())));
        }
    }
    let summary = IngestSummary {
        input_rows,
        retained: cases.len(),
        excluded,
        lint: lint_labels(&cases, schema),
        schema_sha256: schema.hash(),
    };
    Ok((cases, summary))
}

pub fn write_cases(path: &Path, cases: &[LabeledCase]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| AppError::io(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn read_cases(path: &Path) -> Result<Vec<LabeledCase>> {
    let f = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| AppError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Unlabeled input rows for `predict`: case key and normalized text.
pub fn read_prediction_input(
    path: &Path,
    schema_map: &SchemaMap,
    text: &TextConfig,
) -> Result<(Vec<(String, String)>, usize)> {
    let stops = stop_list(text)?;
    let (records, report) = ingest_records(path, schema_map)?;
    let rows = records
        .iter()
        .map(|r| (r.key(), normalize_text(&text.fields.text_of(r), &stops)))
        .collect();
    Ok((rows, report.excluded_count()))
}

//! Gold label files and labeled cases.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::record::{case_key, open_delimited, DeathRecord, TextFields};
use crate::schema::{LabelSchema, LabelVector};
use crate::text::{normalize_text, StopList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub record: DeathRecord,
    pub normalized_text: String,
    pub gold: LabelVector,
}

impl LabeledCase {
    pub fn key(&self) -> String {
        self.record.key()
    }
}

/// Gold labels keyed by case key (see [`DeathRecord::key`]).
#[derive(Debug, Clone, Default)]
pub struct GoldLabels {
    by_key: HashMap<String, LabelVector>,
    has_jurisdiction: bool,
}

impl GoldLabels {
    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn insert(&mut self, key: String, labels: LabelVector) {
        self.by_key.insert(key, labels);
    }

    /// Finds the labels for a record. Files without a jurisdiction column
    /// join on the bare case id.
    pub fn get(&self, record: &DeathRecord) -> Option<&LabelVector> {
        if self.has_jurisdiction {
            self.by_key.get(&record.key())
        } else {
            self.by_key.get(record.case_id.trim())
        }
    }
}

/// Reads a delimited gold file: `case_id`, optional `jurisdiction`, and one
/// 0/1 column per schema class named exactly as the class.
pub fn load_gold_labels(path: &Path, schema: &LabelSchema) -> Result<GoldLabels> {
    let mut reader = open_delimited(path)?;
    let headers = reader
        .headers()
        .map_err(|e| CoreError::Ingest(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("case_id").ok_or_else(|| {
        CoreError::Ingest(format!("{}: gold file lacks a `case_id` column", path.display()))
    })?;
    let jurisdiction_col = col("jurisdiction");
    let class_cols: Vec<usize> = schema
        .classes
        .iter()
        .map(|c| {
            col(c).ok_or_else(|| {
                CoreError::Ingest(format!("{}: gold file lacks class column `{c}`", path.display()))
            })
        })
        .collect::<Result<_>>()?;

    let mut gold = GoldLabels {
        by_key: HashMap::new(),
        has_jurisdiction: jurisdiction_col.is_some(),
    };
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CoreError::Ingest(format!("{}: {e}", path.display())))?;
        let id = row.get(id_col).unwrap_or_default().trim();
        let key = match jurisdiction_col {
            Some(j) => case_key(row.get(j).unwrap_or_default(), id),
            None => id.to_string(),
        };
        let mut bits = Vec::with_capacity(class_cols.len());
        for (&c, class) in class_cols.iter().zip(&schema.classes) {
            let raw = row.get(c).unwrap_or_default().trim();
            let bit = match raw {
                "0" | "0.0" | "" => 0,
                "1" | "1.0" => 1,
                other => {
                    return Err(CoreError::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("class `{class}` has non-binary value `{other}`"),
                    })
                }
            };
            bits.push(bit);
        }
        if gold.by_key.insert(key.clone(), LabelVector::new(bits)?).is_some() {
            return Err(CoreError::Validation(format!("duplicate gold label row for `{key}`")));
        }
    }
    Ok(gold)
}

/// Joins records with gold labels and normalizes their text.
///
/// Every record must have a gold row; a missing one is a validation error
/// naming the case.
pub fn label_cases(
    records: Vec<DeathRecord>,
    gold: &GoldLabels,
    stop_list: &StopList,
    fields: TextFields,
) -> Result<Vec<LabeledCase>> {
    records
        .into_iter()
        .map(|record| {
            let labels = gold.get(&record).cloned().ok_or_else(|| {
                CoreError::Validation(format!("no gold labels for case `{}`", record.key()))
            })?;
            let normalized_text = normalize_text(&fields.text_of(&record), stop_list);
            Ok(LabeledCase {
                record,
                normalized_text,
                gold: labels,
            })
        })
        .collect()
}

/// Writes gold labels in the format [`load_gold_labels`] reads.
pub fn write_gold_labels(path: &Path, schema: &LabelSchema, cases: &[LabeledCase]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CoreError::Ingest(format!("{}: {e}", path.display())))?;
    let mut header = vec!["case_id".to_string(), "jurisdiction".to_string()];
    header.extend(schema.classes.iter().cloned());
    let csv_err = |e: csv::Error| CoreError::Ingest(format!("{}: {e}", path.display()));
    writer.write_record(&header).map_err(csv_err)?;
    for case in cases {
        let mut row = vec![case.record.case_id.clone(), case.record.jurisdiction.clone()];
        row.extend(case.gold.bits().iter().map(|b| b.to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

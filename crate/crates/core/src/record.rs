//! Death-certificate records and tabular ingestion.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeathRecord {
    pub case_id: String,
    pub jurisdiction: String,
    pub age: Option<u32>,
    pub gender: String,
    pub race: String,
    pub date_of_death: Option<NaiveDate>,
    pub manner_of_death: String,
    pub primary_cause: String,
    pub secondary_cause: String,
}

impl DeathRecord {
    /// Minimal record with only an id and the two cause fields.
    pub fn with_causes(case_id: &str, primary: &str, secondary: &str) -> Self {
        DeathRecord {
            case_id: case_id.to_string(),
            jurisdiction: String::new(),
            age: None,
            gender: String::new(),
            race: String::new(),
            date_of_death: None,
            manner_of_death: String::new(),
            primary_cause: primary.to_string(),
            secondary_cause: secondary.to_string(),
        }
    }

    /// Unique key within a dataset: `jurisdiction/case_id`, or the bare id
    /// when no jurisdiction is recorded.
    pub fn key(&self) -> String {
        case_key(&self.jurisdiction, &self.case_id)
    }

    /// Text fed to the models: primary and secondary cause joined by a space.
    pub fn combined_text(&self) -> String {
        let primary = self.primary_cause.trim();
        let secondary = self.secondary_cause.trim();
        match (primary.is_empty(), secondary.is_empty()) {
            (false, false) => format!("{primary} {secondary}"),
            (false, true) => primary.to_string(),
            (true, false) => secondary.to_string(),
            (true, true) => String::new(),
        }
    }
}

pub fn case_key(jurisdiction: &str, case_id: &str) -> String {
    let j = jurisdiction.trim();
    if j.is_empty() {
        case_id.trim().to_string()
    } else {
        format!("{j}/{}", case_id.trim())
    }
}

/// Which record fields feed the model text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextFields {
    #[default]
    PrimaryAndSecondary,
    PrimaryOnly,
}

impl TextFields {
    pub fn text_of(&self, record: &DeathRecord) -> String {
        match self {
            TextFields::PrimaryAndSecondary => record.combined_text(),
            TextFields::PrimaryOnly => record.primary_cause.trim().to_string(),
        }
    }
}

/// Maps source column names onto [`DeathRecord`] fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub case_id: String,
    pub primary_cause: String,
    #[serde(default)]
    pub secondary_cause: Option<String>,
    #[serde(default)]
    pub jurisdiction: Option<String>,
    #[serde(default)]
    pub age: Option<String>,
    #[serde(default)]
    pub gender: Option<String>,
    #[serde(default)]
    pub race: Option<String>,
    #[serde(default)]
    pub date_of_death: Option<String>,
    #[serde(default)]
    pub manner_of_death: Option<String>,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            case_id: "case_id".into(),
            primary_cause: "primary_cause".into(),
            secondary_cause: Some("secondary_cause".into()),
            jurisdiction: Some("jurisdiction".into()),
            age: Some("age".into()),
            gender: Some("gender".into()),
            race: Some("race".into()),
            date_of_death: Some("date_of_death".into()),
            manner_of_death: Some("manner_of_death".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    MissingText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub case_id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub input_rows: usize,
    pub retained: usize,
    pub excluded: Vec<Exclusion>,
}

impl ExclusionReport {
    pub fn excluded_count(&self) -> usize {
        self.excluded.len()
    }

    pub fn by_reason(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.excluded {
            let key = serde_json::to_value(e.reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }
}

/// Picks tab when the header line contains one, comma otherwise.
pub fn sniff_delimiter(header_line: &str) -> u8 {
    if header_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

pub(crate) fn open_delimited(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let head = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let first_line = head.split(|&b| b == b'\n').next().unwrap_or(&[]);
    let delimiter = sniff_delimiter(&String::from_utf8_lossy(first_line));
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CoreError::Ingest(format!("{}: {e}", path.display())))
}

/// ISO-8601 first, then month/day/year with `/` or `-`.
pub fn parse_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    let date_part = raw.split(['T', ' ']).next().unwrap_or(raw);
    NaiveDate::parse_from_str(date_part, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(date_part, "%m/%d/%Y"))
        .or_else(|_| NaiveDate::parse_from_str(date_part, "%m-%d-%Y"))
        .ok()
}

/// Reads a delimited file with a header row into records.
///
/// Rows whose combined cause text is blank are excluded with a reason code;
/// `retained + excluded == input_rows` always holds on success.
pub fn ingest_records(
    source: &Path,
    schema_map: &SchemaMap,
) -> Result<(Vec<DeathRecord>, ExclusionReport)> {
    let mut reader = open_delimited(source)?;
    let headers = reader
        .headers()
        .map_err(|e| CoreError::Ingest(format!("{}: {e}", source.display())))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        column(name).ok_or_else(|| {
            CoreError::Ingest(format!(
                "{}: required column `{name}` not found",
                source.display()
            ))
        })
    };
    let optional = |name: &Option<String>| -> Result<Option<usize>> {
        match name {
            Some(n) => Ok(column(n)),
            None => Ok(None),
        }
    };

    let id_col = required(&schema_map.case_id)?;
    let primary_col = required(&schema_map.primary_cause)?;
    let secondary_col = optional(&schema_map.secondary_cause)?;
    let jurisdiction_col = optional(&schema_map.jurisdiction)?;
    let age_col = optional(&schema_map.age)?;
    let gender_col = optional(&schema_map.gender)?;
    let race_col = optional(&schema_map.race)?;
    let date_col = optional(&schema_map.date_of_death)?;
    let manner_col = optional(&schema_map.manner_of_death)?;

    let mut records = Vec::new();
    let mut report = ExclusionReport::default();
    let mut seen = HashSet::new();

    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| CoreError::Ingest(format!("row {row_no}: {e}")))?;
        report.input_rows += 1;
        let get = |col: Option<usize>| {
            col.and_then(|c| row.get(c))
                .map(|s| s.trim().to_string())
                .unwrap_or_default()
        };

        let case_id = get(Some(id_col));
        if case_id.is_empty() {
            return Err(CoreError::Validation(format!("row {row_no}: empty case_id")));
        }
        let age_raw = get(age_col);
        let age = if age_raw.is_empty() {
            None
        } else {
            // Ages sometimes arrive as "45.0".
            match age_raw.parse::<f64>() {
                Ok(a) if a >= 0.0 && a.is_finite() => Some(a.floor() as u32),
                _ => {
                    return Err(CoreError::Validation(format!(
                        "row {row_no}: invalid age `{age_raw}` for case {case_id}"
                    )))
                }
            }
        };
        let date_raw = get(date_col);
        let date_of_death = if date_raw.is_empty() {
            None
        } else {
            Some(parse_date(&date_raw).ok_or_else(|| {
                CoreError::Validation(format!(
                    "row {row_no}: unparseable date `{date_raw}` for case {case_id}"
                ))
            })?)
        };

        let record = DeathRecord {
            case_id,
            jurisdiction: get(jurisdiction_col),
            age,
            gender: get(gender_col),
            race: get(race_col),
            date_of_death,
            manner_of_death: get(manner_col),
            primary_cause: row.get(primary_col).unwrap_or_default().to_string(),
            secondary_cause: secondary_col
                .and_then(|c| row.get(c))
                .unwrap_or_default()
                .to_string(),
        };

        if !seen.insert(record.key()) {
            return Err(CoreError::Validation(format!(
                "duplicate case_id `{}` (jurisdiction `{}`)",
                record.case_id, record.jurisdiction
            )));
        }

        if record.combined_text().trim().is_empty() {
            report.excluded.push(Exclusion {
                row: row_no,
                case_id: record.case_id,
                reason: ExclusionReason::MissingText,
            });
            continue;
        }
        records.push(record);
    }
    report.retained = records.len();
    debug_assert_eq!(report.retained + report.excluded.len(), report.input_rows);
    tracing::info!(
        retained = report.retained,
        excluded = report.excluded.len(),
        "ingested {}",
        source.display()
    );
    Ok((records, report))
}

//! Canonical answer grammar: comma-separated class names, or `none`.

use codtox_core::{LabelSchema, LabelVector};
use serde::{Deserialize, Serialize};

pub const NONE_TOKEN: &str = "none";

/// Answer-format sentence embedded verbatim in every instruction.
pub const ANSWER_FORMAT: &str = "Answer with the matching class names separated by commas, \
exactly as written in the class list, or with the single word none if no listed substance contributed to the death.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    /// Some items were not class names and were ignored.
    Repaired,
    /// Nothing usable; scored as all-negative.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub labels: LabelVector,
    pub status: ParseStatus,
    pub raw: String,
}

pub fn render_answer(labels: &LabelVector, schema: &LabelSchema) -> String {
    let names = labels.positive_classes(schema);
    if names.is_empty() {
        NONE_TOKEN.to_string()
    } else {
        names.join(", ")
    }
}

/// First non-empty line, without an `Answer:` prefix or a trailing period.
fn answer_line(raw: &str) -> &str {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = match line.get(..7) {
        Some(p) if p.eq_ignore_ascii_case("answer:") => line[7..].trim(),
        _ => line,
    };
    line.trim_end_matches('.').trim()
}

pub fn parse_answer(raw: &str, schema: &LabelSchema) -> ParsedAnswer {
    let mut labels = LabelVector::zeros(schema.len());
    let line = answer_line(raw);
    let items: Vec<&str> = line
        .split([',', ';'])
        .map(|s| s.trim().trim_end_matches('.').trim())
        .filter(|s| !s.is_empty())
        .collect();
    let mut matched = 0;
    let mut none = 0;
    let mut unknown = 0;
    for item in &items {
        if item.eq_ignore_ascii_case(NONE_TOKEN) {
            none += 1;
        } else if let Some(j) = schema.lookup(item) {
            labels.set(j, true);
            matched += 1;
        } else {
            unknown += 1;
        }
    }
    let status = match (matched, none, unknown) {
        (0, 0, _) => ParseStatus::Failed,
        (0, 1, 0) => ParseStatus::Ok,
        (_, 0, 0) => ParseStatus::Ok,
        _ => ParseStatus::Repaired,
    };
    if status == ParseStatus::Failed {
        labels = LabelVector::zeros(schema.len());
    }
    ParsedAnswer {
        labels,
        status,
        raw: raw.to_string(),
    }
}

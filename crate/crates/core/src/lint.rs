//! Advisory consistency checks over gold labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labels::LabeledCase;
use crate::schema::LabelSchema;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintWarning {
    pub case_key: String,
    pub child: String,
    pub parent: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintReport {
    pub cases: usize,
    pub positives: BTreeMap<String, usize>,
    /// Number of cases by how many classes are positive.
    pub cardinality: BTreeMap<usize, usize>,
    pub warnings: Vec<LintWarning>,
}

/// Reports implication-edge violations and per-class counts. Never mutates labels.
pub fn lint_labels(cases: &[LabeledCase], schema: &LabelSchema) -> LintReport {
    let edges = schema.edge_indices();
    let mut report = LintReport {
        cases: cases.len(),
        positives: schema.classes.iter().map(|c| (c.clone(), 0)).collect(),
        ..Default::default()
    };
    for case in cases {
        let bits = case.gold.bits();
        for (class, &b) in schema.classes.iter().zip(bits) {
            if b == 1 {
                *report.positives.get_mut(class).unwrap() += 1;
            }
        }
        *report.cardinality.entry(case.gold.count_ones()).or_insert(0) += 1;
        for &(child, parent) in &edges {
            if bits[child] == 1 && bits[parent] == 0 {
                report.warnings.push(LintWarning {
                    case_key: case.key(),
                    child: schema.classes[child].clone(),
                    parent: schema.classes[parent].clone(),
                });
            }
        }
    }
    for w in &report.warnings {
        tracing::warn!(case = %w.case_key, "{} set without {}", w.child, w.parent);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::DeathRecord;
    use crate::schema::LabelVector;

    fn case(id: &str, classes: &[&str]) -> LabeledCase {
        let schema = LabelSchema::default();
        LabeledCase {
            record: DeathRecord::with_causes(id, "x", ""),
            normalized_text: "x".into(),
            gold: LabelVector::from_classes(&schema, classes).unwrap(),
        }
    }

    #[test]
    fn child_without_parent_warns_once_per_edge() {
        let schema = LabelSchema::default();
        let report = lint_labels(&[case("1", &["fentanyl", "any_drugs"])], &schema);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.warnings[0].child, "fentanyl");
        assert_eq!(report.warnings[0].parent, "any_opioids");
    }

    #[test]
    fn all_zero_is_clean() {
        let schema = LabelSchema::default();
        let cases: Vec<_> = (0..5).map(|i| case(&i.to_string(), &[])).collect();
        let report = lint_labels(&cases, &schema);
        assert!(report.warnings.is_empty());
        assert!(report.positives.values().all(|&c| c == 0));
        assert_eq!(report.cardinality[&0], 5);
    }

    #[test]
    fn counts_positives_per_class() {
        let schema = LabelSchema::default();
        let cases = vec![
            case("1", &["fentanyl", "any_opioids", "any_drugs"]),
            case("2", &["cocaine", "any_drugs"]),
        ];
        let report = lint_labels(&cases, &schema);
        assert!(report.warnings.is_empty());
        assert_eq!(report.positives["any_drugs"], 2);
        assert_eq!(report.positives["fentanyl"], 1);
        assert_eq!(report.cardinality[&3], 1);
    }
}

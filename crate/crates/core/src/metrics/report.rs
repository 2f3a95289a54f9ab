use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{
    bootstrap_ci, check_shapes, confusion, hamming_loss, macro_f1, ranking_metrics,
    subset_accuracy, BootstrapConfig, ConfidenceInterval, F1Mode,
};
use crate::error::{CoreError, Result};
use crate::schema::LabelSchema;

pub const ZERO_DIVISION_NOTE: &str = "F1 zero-division rule: a class with no gold positives and \
no predicted positives scores 1; any other empty precision or recall denominator scores 0.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    Validation,
    InternalTest,
    ExternalTest,
}

impl std::fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetTag::Validation => "validation",
            DatasetTag::InternalTest => "internal_test",
            DatasetTag::ExternalTest => "external_test",
        })
    }
}

/// Predictions, gold labels, and optional continuous scores for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub pred: Array2<u8>,
    pub gold: Array2<u8>,
    /// Per-class scores for ranking metrics. Binary predictions stand in when absent.
    pub scores: Option<Array2<f64>>,
}

impl EvalData {
    pub fn new(pred: Array2<u8>, gold: Array2<u8>, scores: Option<Array2<f64>>) -> Result<Self> {
        check_shapes(&pred.view(), &gold.view())?;
        if let Some(s) = &scores {
            check_shapes(&s.view(), &gold.view())?;
        }
        Ok(EvalData { pred, gold, scores })
    }

    pub fn n_cases(&self) -> usize {
        self.gold.nrows()
    }

    pub fn select(&self, rows: &[usize]) -> EvalData {
        EvalData {
            pred: self.pred.select(Axis(0), rows),
            gold: self.gold.select(Axis(0), rows),
            scores: self.scores.as_ref().map(|s| s.select(Axis(0), rows)),
        }
    }

    pub fn ranking_scores(&self) -> Array2<f64> {
        match &self.scores {
            Some(s) => s.clone(),
            None => self.pred.mapv(f64::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub f1: f64,
    /// Mean of positive-class and negative-class F1 for this column alone.
    pub binary_macro_f1: f64,
    pub auroc: Option<f64>,
    pub average_precision: Option<f64>,
}

/// Point estimates with bootstrap intervals for one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub dataset: DatasetTag,
    pub n_cases: usize,
    #[serde(default)]
    pub split_fingerprint: Option<String>,
    /// Keys: `macro_f1`, `accuracy` (subset), `hamming_loss`, `macro_auroc`,
    /// `micro_auroc`, `macro_average_precision`.
    pub metrics: BTreeMap<String, ConfidenceInterval>,
    pub per_class: Vec<ClassMetrics>,
    pub skipped_ranking_classes: Vec<String>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&ConfidenceInterval> {
        self.metrics.get(metric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

type MetricFn = fn(&EvalData) -> Option<f64>;

fn metric_table() -> Vec<(&'static str, MetricFn)> {
    vec![
        ("accuracy", |d| subset_accuracy(d.pred.view(), d.gold.view()).ok()),
        ("hamming_loss", |d| hamming_loss(d.pred.view(), d.gold.view()).ok()),
        ("macro_auroc", |d| {
            ranking_metrics(d.ranking_scores().view(), d.gold.view()).ok()?.macro_auroc
        }),
        ("macro_average_precision", |d| {
            ranking_metrics(d.ranking_scores().view(), d.gold.view())
                .ok()?
                .macro_average_precision
        }),
        ("macro_f1", |d| macro_f1(d.pred.view(), d.gold.view(), F1Mode::OverLabels).ok()),
        ("micro_auroc", |d| {
            ranking_metrics(d.ranking_scores().view(), d.gold.view()).ok()?.micro_auroc
        }),
    ]
}

/// Computes every metric with a bootstrap interval, plus per-class figures.
///
/// Metrics undefined on the full data (e.g. AUROC with no positive class
/// anywhere) are reported as NaN-free point-only intervals of 0 and listed in
/// `notes`.
pub fn evaluate(
    model: &str,
    dataset: DatasetTag,
    schema: &LabelSchema,
    data: &EvalData,
    bootstrap: &BootstrapConfig,
) -> Result<MetricReport> {
    if data.gold.ncols() != schema.len() {
        return Err(CoreError::Shape(format!(
            "evaluation has {} label columns, schema has {}",
            data.gold.ncols(),
            schema.len()
        )));
    }
    let mut notes = vec![ZERO_DIVISION_NOTE.to_string()];
    let mut metrics = BTreeMap::new();
    for (name, f) in metric_table() {
        let ci = bootstrap_ci(data.n_cases(), |rows| f(&data.select(rows)), bootstrap);
        match ci {
            Ok(ci) => {
                metrics.insert(name.to_string(), ci);
            }
            Err(e) => {
                notes.push(format!("{name} undefined: {e}"));
                metrics.insert(name.to_string(), ConfidenceInterval::point_only(0.0));
            }
        }
    }
    let scores = data.ranking_scores();
    let ranking = ranking_metrics(scores.view(), data.gold.view())?;
    let pred = data.pred.view();
    let gold = data.gold.view();
    let per_class = schema
        .classes
        .iter()
        .enumerate()
        .map(|(j, class)| {
            let pos = confusion(&pred, &gold, j, 1);
            let neg = confusion(&pred, &gold, j, 0);
            ClassMetrics {
                class: class.clone(),
                support: pos.tp + pos.fn_,
                predicted: pos.tp + pos.fp,
                f1: pos.f1(),
                binary_macro_f1: (pos.f1() + neg.f1()) / 2.0,
                auroc: ranking.per_class_auroc[j],
                average_precision: ranking.per_class_average_precision[j],
            }
        })
        .collect();
    let skipped_ranking_classes = ranking
        .skipped
        .iter()
        .map(|&j| schema.classes[j].clone())
        .collect::<Vec<_>>();
    if !skipped_ranking_classes.is_empty() {
        tracing::warn!(classes = ?skipped_ranking_classes, "single-valued gold, skipped in ranking metrics");
    }
    if data.scores.is_none() {
        notes.push("ranking metrics computed from binary predictions (no scores)".into());
    }
    Ok(MetricReport {
        model: model.to_string(),
        dataset,
        n_cases: data.n_cases(),
        split_fingerprint: None,
        metrics,
        per_class,
        skipped_ranking_classes,
        notes,
    })
}

fn fmt_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 0.01 {
        format!("{v:.5}")
    } else {
        format!("{v:.3}")
    }
}

fn fmt_ci(ci: &ConfidenceInterval) -> String {
    format!("{} ({}-{})", fmt_value(ci.point), fmt_value(ci.low), fmt_value(ci.high))
}

/// Tab-delimited table: one row per headline metric, one column per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let rows = [
        ("F1 Score", "macro_f1"),
        ("Accuracy", "accuracy"),
        ("AUROC", "macro_auroc"),
        ("Hamming Loss", "hamming_loss"),
        ("Average Precision", "macro_average_precision"),
    ];
    let mut out = String::from("Metric");
    for r in reports {
        out.push('\t');
        out.push_str(&format!("{} [{}]", r.model, r.dataset));
    }
    out.push('\n');
    for (label, key) in rows {
        out.push_str(label);
        for r in reports {
            out.push('\t');
            match r.get(key) {
                Some(ci) => out.push_str(&fmt_ci(ci)),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

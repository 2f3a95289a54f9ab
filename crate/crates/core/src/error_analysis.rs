//! Per-class false-positive / false-negative tables.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::confusion;
use crate::schema::LabelSchema;

/// Example case ids kept per class.
pub const EXAMPLE_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub class: String,
    pub fp: usize,
    pub fn_: usize,
    pub total: usize,
    /// Sorted by case id, capped at [`EXAMPLE_CAP`].
    pub fp_examples: Vec<String>,
    pub fn_examples: Vec<String>,
    /// Free-text slot for a reviewer's explanation.
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub total_fp: usize,
    pub total_fn: usize,
    pub total: usize,
    /// Cases with at least one wrong label.
    pub misclassified_cases: usize,
}

pub fn build_error_table(
    pred: ArrayView2<u8>,
    gold: ArrayView2<u8>,
    case_ids: &[String],
    schema: &LabelSchema,
) -> Result<ErrorTable> {
    if pred.dim() != gold.dim() {
        return Err(CoreError::Shape(format!("prediction {:?} vs gold {:?}", pred.dim(), gold.dim())));
    }
    if case_ids.len() != pred.nrows() || schema.len() != pred.ncols() {
        return Err(CoreError::Shape(format!(
            "{} case ids and {} classes for a {:?} matrix",
            case_ids.len(),
            schema.len(),
            pred.dim()
        )));
    }
    let mut rows = Vec::with_capacity(schema.len());
    for (j, class) in schema.classes.iter().enumerate() {
        let c = confusion(&pred, &gold, j, 1);
        let mut fp_ids = Vec::new();
        let mut fn_ids = Vec::new();
        for i in 0..pred.nrows() {
            match (pred[[i, j]], gold[[i, j]]) {
                (1, 0) => fp_ids.push(case_ids[i].clone()),
                (0, 1) => fn_ids.push(case_ids[i].clone()),
                _ => {}
            }
        }
        for ids in [&mut fp_ids, &mut fn_ids] {
            ids.sort();
            ids.truncate(EXAMPLE_CAP);
        }
        rows.push(ErrorRow {
            class: class.clone(),
            fp: c.fp,
            fn_: c.fn_,
            total: c.fp + c.fn_,
            fp_examples: fp_ids,
            fn_examples: fn_ids,
            notes: String::new(),
        });
    }
    let misclassified_cases = pred
        .rows()
        .into_iter()
        .zip(gold.rows())
        .filter(|(p, g)| p != g)
        .count();
    let total_fp = rows.iter().map(|r| r.fp).sum();
    let total_fn = rows.iter().map(|r| r.fn_).sum();
    Ok(ErrorTable {
        rows,
        total_fp,
        total_fn,
        total: total_fp + total_fn,
        misclassified_cases,
    })
}

impl ErrorTable {
    /// Tab-delimited: class, FP, FN, total, notes, then a Total row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("Drug Class\tFP\tFN\tTotal Errors\tNotes\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.class, r.fp, r.fn_, r.total, r.notes));
        }
        out.push_str(&format!("Total\t{}\t{}\t{}\t\n", self.total_fp, self.total_fn, self.total));
        out
    }

    pub fn row(&self, class: &str) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.class == class)
    }
}

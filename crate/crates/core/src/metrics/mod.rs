//! Evaluation metrics shared by every model family.
//!
//! Label matrices are `N x L` with 0/1 entries; score matrices are real
//! `N x L`. F1 uses the zero-division rule: a class with no positive gold
//! and no positive prediction scores 1, any other empty denominator scores 0.

mod bootstrap;
mod ranking;
mod report;

pub use bootstrap::{bootstrap_ci, percentile, resample_indices, BootstrapConfig, ConfidenceInterval};
pub use ranking::{auroc, average_precision, ranking_metrics, RankingSummary};
pub use report::{
    evaluate, render_table, ClassMetrics, DatasetTag, EvalData, MetricReport, ZERO_DIVISION_NOTE,
};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Mean of per-class F1 across the label columns.
    OverLabels,
    /// Per column, mean of the F1 of the positive and the negative class;
    /// then averaged over columns. Used for per-drug binary reports.
    OverBinaryClasses,
}

pub(crate) fn check_shapes<A, B>(pred: &ArrayView2<A>, gold: &ArrayView2<B>) -> Result<()> {
    if pred.dim() != gold.dim() {
        return Err(CoreError::Shape(format!(
            "prediction is {:?}, gold is {:?}",
            pred.dim(),
            gold.dim()
        )));
    }
    Ok(())
}

/// Confusion counts for one column; `positive` selects which value counts as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }
}

pub fn confusion(pred: &ArrayView2<u8>, gold: &ArrayView2<u8>, col: usize, positive: u8) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &g) in pred.column(col).iter().zip(gold.column(col)) {
        match (p == positive, g == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn per_class_f1(pred: ArrayView2<u8>, gold: ArrayView2<u8>) -> Result<Vec<f64>> {
    check_shapes(&pred, &gold)?;
    Ok((0..pred.ncols()).map(|j| confusion(&pred, &gold, j, 1).f1()).collect())
}

pub fn macro_f1(pred: ArrayView2<u8>, gold: ArrayView2<u8>, mode: F1Mode) -> Result<f64> {
    check_shapes(&pred, &gold)?;
    let l = pred.ncols();
    if l == 0 {
        return Err(CoreError::Shape("no label columns".into()));
    }
    let total: f64 = (0..l)
        .map(|j| match mode {
            F1Mode::OverLabels => confusion(&pred, &gold, j, 1).f1(),
            F1Mode::OverBinaryClasses => {
                (confusion(&pred, &gold, j, 1).f1() + confusion(&pred, &gold, j, 0).f1()) / 2.0
            }
        })
        .sum();
    Ok(total / l as f64)
}

fn non_empty<A>(pred: &ArrayView2<A>) -> Result<()> {
    if pred.is_empty() {
        return Err(CoreError::Validation("metric needs at least one label slot".into()));
    }
    Ok(())
}

/// Fraction of label slots where prediction and gold differ.
pub fn hamming_loss(pred: ArrayView2<u8>, gold: ArrayView2<u8>) -> Result<f64> {
    check_shapes(&pred, &gold)?;
    non_empty(&pred)?;
    let wrong = pred.iter().zip(gold.iter()).filter(|(p, g)| p != g).count();
    Ok(wrong as f64 / pred.len() as f64)
}

/// Fraction of label slots predicted correctly (`1 - hamming_loss`).
pub fn label_accuracy(pred: ArrayView2<u8>, gold: ArrayView2<u8>) -> Result<f64> {
    check_shapes(&pred, &gold)?;
    non_empty(&pred)?;
    let right = pred.iter().zip(gold.iter()).filter(|(p, g)| p == g).count();
    Ok(right as f64 / pred.len() as f64)
}

/// Fraction of rows whose every label matches.
pub fn subset_accuracy(pred: ArrayView2<u8>, gold: ArrayView2<u8>) -> Result<f64> {
    check_shapes(&pred, &gold)?;
    if pred.nrows() == 0 {
        return Err(CoreError::Validation("subset accuracy needs at least one case".into()));
    }
    let exact = pred
        .rows()
        .into_iter()
        .zip(gold.rows())
        .filter(|(p, g)| p == g)
        .count();
    Ok(exact as f64 / pred.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let g = array![[1u8, 0, 1], [0, 0, 0], [1, 1, 0]];
        assert_eq!(macro_f1(g.view(), g.view(), F1Mode::OverLabels).unwrap(), 1.0);
        assert_eq!(macro_f1(g.view(), g.view(), F1Mode::OverBinaryClasses).unwrap(), 1.0);
        assert_eq!(hamming_loss(g.view(), g.view()).unwrap(), 0.0);
        assert_eq!(subset_accuracy(g.view(), g.view()).unwrap(), 1.0);
    }

    #[test]
    fn small_hand_example() {
        // class 0: tp=2 fp=0 fn=0 -> 1.0 ; class 1: tp=0 fp=1 fn=1 -> 0.0
        let pred = array![[1u8, 0], [0, 0], [1, 1]];
        let gold = array![[1u8, 0], [0, 1], [1, 0]];
        assert_eq!(per_class_f1(pred.view(), gold.view()).unwrap(), vec![1.0, 0.0]);
        assert_eq!(macro_f1(pred.view(), gold.view(), F1Mode::OverLabels).unwrap(), 0.5);
        // negative class of column 1: tp=1 (row 0) fp=1 (row 1) fn=1 (row 2) -> 0.5
        let binary = macro_f1(pred.view(), gold.view(), F1Mode::OverBinaryClasses).unwrap();
        assert!((binary - (1.0 + (0.0 + 0.5) / 2.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn hamming_ratio_and_row_exactness() {
        let gold = Array2::<u8>::zeros((4, 5));
        let mut pred = gold.clone();
        pred[[0, 0]] = 1;
        pred[[0, 3]] = 1;
        pred[[2, 4]] = 1;
        assert!((hamming_loss(pred.view(), gold.view()).unwrap() - 0.15).abs() < 1e-15);
        let mut one = gold.clone();
        one[[1, 2]] = 1;
        assert_eq!(subset_accuracy(one.view(), gold.view()).unwrap(), 0.75);
    }

    #[test]
    fn empty_classes_score_one() {
        let z = Array2::<u8>::zeros((3, 2));
        assert_eq!(macro_f1(z.view(), z.view(), F1Mode::OverLabels).unwrap(), 1.0);
        let mut pred = z.clone();
        pred[[0, 0]] = 1;
        assert_eq!(per_class_f1(pred.view(), z.view()).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::<u8>::zeros((3, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(macro_f1(a.view(), b.view(), F1Mode::OverLabels).is_err());
        assert!(hamming_loss(a.view(), b.view()).is_err());
        assert!(subset_accuracy(a.view(), b.view()).is_err());
    }

    fn matrices() -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
        (1usize..30, 1usize..11).prop_flat_map(|(n, l)| {
            (
                prop::collection::vec(0u8..2, n * l),
                prop::collection::vec(0u8..2, n * l),
            )
                .prop_map(move |(p, g)| {
                    (
                        Array2::from_shape_vec((n, l), p).unwrap(),
                        Array2::from_shape_vec((n, l), g).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn metric_invariants((pred, gold) in matrices()) {
            let h = hamming_loss(pred.view(), gold.view()).unwrap();
            let a = label_accuracy(pred.view(), gold.view()).unwrap();
            prop_assert_eq!(h + a, 1.0);
            let s = subset_accuracy(pred.view(), gold.view()).unwrap();
            prop_assert!(s <= a + 1e-15);
            let f = macro_f1(pred.view(), gold.view(), F1Mode::OverLabels).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let per = per_class_f1(pred.view(), gold.view()).unwrap();
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            prop_assert!((mean - f).abs() < 1e-15);
        }
    }
}

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::check_shapes;
use crate::error::Result;

/// Area under the ROC curve via the rank-sum statistic with midranks for
/// ties. `None` when `gold` lacks either class.
pub fn auroc(scores: &[f64], gold: &[u8]) -> Option<f64> {
    let n_pos = gold.iter().filter(|&&g| g == 1).count();
    let n_neg = gold.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if gold[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: sum over descending score thresholds of
/// `(recall_k - recall_{k-1}) * precision_k`. Tied scores form one threshold.
/// `None` when `gold` has no positives or no negatives.
pub fn average_precision(scores: &[f64], gold: &[u8]) -> Option<f64> {
    let n_pos = gold.iter().filter(|&&g| g == 1).count();
    if n_pos == 0 || n_pos == gold.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if gold[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    /// Mean over classes having both a positive and a negative case.
    pub macro_auroc: Option<f64>,
    pub macro_average_precision: Option<f64>,
    /// AUROC over all (case, class) pairs pooled.
    pub micro_auroc: Option<f64>,
    pub per_class_auroc: Vec<Option<f64>>,
    pub per_class_average_precision: Vec<Option<f64>>,
    /// Columns with single-valued gold, left out of the macro means.
    pub skipped: Vec<usize>,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Per-class and macro AUROC and average precision.
pub fn ranking_metrics(scores: ArrayView2<f64>, gold: ArrayView2<u8>) -> Result<RankingSummary> {
    check_shapes(&scores, &gold)?;
    let mut per_auc = Vec::with_capacity(scores.ncols());
    let mut per_ap = Vec::with_capacity(scores.ncols());
    let mut skipped = Vec::new();
    for j in 0..scores.ncols() {
        let s: Vec<f64> = scores.column(j).to_vec();
        let g: Vec<u8> = gold.column(j).to_vec();
        let auc = auroc(&s, &g);
        if auc.is_none() {
            skipped.push(j);
        }
        per_auc.push(auc);
        per_ap.push(average_precision(&s, &g));
    }
    let pooled_s: Vec<f64> = scores.iter().copied().collect();
    let pooled_g: Vec<u8> = gold.iter().copied().collect();
    Ok(RankingSummary {
        macro_auroc: mean_defined(&per_auc),
        macro_average_precision: mean_defined(&per_ap),
        micro_auroc: auroc(&pooled_s, &pooled_g),
        per_class_auroc: per_auc,
        per_class_average_precision: per_ap,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// Exhaustive positive/negative pair enumeration.
    fn pairwise_auroc(s: &[f64], g: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if g[i] == 1 && g[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn six_case_instance() {
        let s = [0.9, 0.8, 0.7, 0.4, 0.3, 0.1];
        let g = [1u8, 1, 0, 1, 0, 0];
        // positives at 0.9, 0.8, 0.4 beat negatives: 3 + 3 + 2 = 8 of 9 pairs
        assert!((auroc(&s, &g).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!((pairwise_auroc(&s, &g) - 8.0 / 9.0).abs() < 1e-15);
        // thresholds: P@1=1 R=1/3, P@2=1 R=2/3, P@4=3/4 R=1
        let expected = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * 0.75;
        assert!((average_precision(&s, &g).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_constant_scores() {
        let g = array![[1u8, 0], [0, 1], [1, 1], [0, 0]];
        let perfect = g.mapv(f64::from);
        let r = ranking_metrics(perfect.view(), g.view()).unwrap();
        assert_eq!(r.macro_auroc, Some(1.0));
        assert_eq!(r.macro_average_precision, Some(1.0));
        let constant = Array2::from_elem((4, 2), 0.3);
        let r = ranking_metrics(constant.view(), g.view()).unwrap();
        assert_eq!(r.macro_auroc, Some(0.5));
    }

    #[test]
    fn single_valued_gold_is_skipped() {
        let g = array![[1u8, 0], [0, 0], [1, 0]];
        let s = array![[0.9, 0.1], [0.2, 0.5], [0.8, 0.3]];
        let r = ranking_metrics(s.view(), g.view()).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.per_class_auroc[1], None);
        assert_eq!(r.macro_auroc, Some(1.0));
    }

    #[test]
    fn ties_with_positive_and_negative() {
        let s = [0.5, 0.5, 0.2];
        let g = [1u8, 0, 0];
        assert!((auroc(&s, &g).unwrap() - 0.75).abs() < 1e-15);
        // one threshold at 0.5: P=1/2 R=1
        assert!((average_precision(&s, &g).unwrap() - 0.5).abs() < 1e-15);
    }
}

//! Stratified k-fold cross-validation and grid search by mean fold AUROC.

use codtox_core::metrics::auroc;
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClassicError, Result};
use crate::grid::{describe, Combination, HyperGrid};
use crate::model::{check_combination, BinaryModel};
use crate::prep::{balanced_weights, check_binary, check_features};

pub const DEFAULT_FOLDS: usize = 10;

/// Fold index per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for &f in &self.fold_of {
            h.update((f as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// (train rows, held-out rows) for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &g) in self.fold_of.iter().enumerate() {
            if g == f { test.push(i) } else { train.push(i) }
        }
        (train, test)
    }
}

/// Shuffles each class separately and deals rows round-robin into `k` folds.
/// Every held-out fold must contain at least two positives and two negatives.
pub fn stratified_folds(y: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(ClassicError::Config(format!("need at least 2 folds, got {k}")));
    }
    let (pos, neg) = check_binary(y)?;
    if pos == 0 || neg == 0 {
        return Err(ClassicError::Training(format!(
            "labels are single-valued ({pos} positive, {neg} negative)"
        )));
    }
    if pos < 2 * k || neg < 2 * k {
        return Err(ClassicError::Fold(format!(
            "{k}-fold CV needs at least {} positives and {} negatives, have {pos} and {neg}",
            2 * k,
            2 * k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; y.len()];
    for class in [1u8, 0u8] {
        let mut rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        rows.shuffle(&mut rng);
        for (j, r) in rows.into_iter().enumerate() {
            fold_of[r] = j % k;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub combination: Combination,
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub best_index: usize,
    pub results: Vec<CvResult>,
    pub fold_fingerprint: String,
}

impl GridSearchOutcome {
    pub fn best(&self) -> &CvResult {
        &self.results[self.best_index]
    }
}

/// Index of the largest score; ties go to the earliest.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Evaluates every grid combination on the same stratified folds with
/// balanced class weights, scoring each fold by AUROC.
pub fn grid_search_cv(
    x: ArrayView2<f64>,
    y: &[u8],
    grid: &HyperGrid,
    n_folds: usize,
    seed: u64,
) -> Result<GridSearchOutcome> {
    if x.nrows() != y.len() {
        return Err(ClassicError::Validation(format!("{} feature rows but {} labels", x.nrows(), y.len())));
    }
    grid.validate()?;
    check_features(x)?;
    let folds = stratified_folds(y, n_folds, seed)?;
    let combos = grid.combinations();
    for c in &combos {
        check_combination(grid.architecture, c)?;
    }
    let fold_data: Vec<(Vec<usize>, Vec<usize>)> = (0..n_folds).map(|f| folds.split(f)).collect();
    let tasks: Vec<(usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..n_folds).map(move |f| (c, f)))
        .collect();
    let scores: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|&(c, f)| {
            let (train, test) = &fold_data[f];
            let xt = x.select(Axis(0), train);
            let yt: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let w = balanced_weights(&yt)?;
            let model = BinaryModel::fit(grid.architecture, &combos[c], xt.view(), &yt, &w, seed)?;
            let p = model.predict_proba(x.select(Axis(0), test).view());
            let yv: Vec<u8> = test.iter().map(|&i| y[i]).collect();
            auroc(&p, &yv).ok_or_else(|| ClassicError::Fold(format!("fold {f} has a single class")))
        })
        .collect();
    let mut results = Vec::with_capacity(combos.len());
    let mut it = scores.into_iter();
    for combo in combos {
        let fold_scores = (0..n_folds).map(|_| it.next().unwrap()).collect::<Result<Vec<f64>>>()?;
        let mean_score = fold_scores.iter().sum::<f64>() / n_folds as f64;
        tracing::debug!(architecture = %grid.architecture, combination = %describe(&combo), mean_score, "cv");
        results.push(CvResult {
            combination: combo,
            fold_scores,
            mean_score,
        });
    }
    let means: Vec<f64> = results.iter().map(|r| r.mean_score).collect();
    let best_index = select_best(&means)
        .ok_or_else(|| ClassicError::Training("no combination produced a finite score".into()))?;
    Ok(GridSearchOutcome {
        best_index,
        results,
        fold_fingerprint: folds.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Architecture, ParamValue};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn folds_are_stratified() {
        let y: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let f = stratified_folds(&y, 10, 1).unwrap();
        for k in 0..10 {
            let (_, test) = f.split(k);
            let pos = test.iter().filter(|&&i| y[i] == 1).count();
            assert!((2..=3).contains(&pos));
            assert!(test.len() >= 9 && test.len() <= 11);
        }
    }

    #[test]
    fn too_few_positives_is_a_fold_error() {
        let y: Vec<u8> = (0..100).map(|i| u8::from(i < 15)).collect();
        assert!(matches!(stratified_folds(&y, 10, 1), Err(ClassicError::Fold(_))));
        let y = vec![0u8; 50];
        assert!(matches!(stratified_folds(&y, 10, 1), Err(ClassicError::Training(_))));
    }

    #[test]
    fn result_count_and_fold_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((120, 3), |_| rng.random::<f64>());
        let y: Vec<u8> = (0..120).map(|i| u8::from(x[[i, 0]] > 0.5)).collect();
        let grid = HyperGrid::new(
            Architecture::LogisticRegression,
            [("c".to_string(), vec![ParamValue::Float(0.1), ParamValue::Float(1.0), ParamValue::Float(10.0)])].into(),
        )
        .unwrap();
        let out = grid_search_cv(x.view(), &y, &grid, 10, 5).unwrap();
        assert_eq!(out.results.len(), 3);
        assert!(out.results.iter().all(|r| r.fold_scores.len() == 10));
        for r in &out.results {
            let mean = r.fold_scores.iter().sum::<f64>() / 10.0;
            assert_eq!(r.mean_score, mean);
        }
        assert!(out.best().mean_score > 0.95);
    }

    #[test]
    fn non_finite_feature_rejected() {
        let mut x = Array2::<f64>::zeros((40, 1));
        x[[7, 0]] = f64::INFINITY;
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let grid = HyperGrid::default_for(Architecture::LogisticRegression);
        let err = grid_search_cv(x.view(), &y, &grid, 10, 0).unwrap_err();
        assert!(err.to_string().contains("row 7"));
    }

    #[test]
    fn ties_go_to_first() {
        assert_eq!(select_best(&[0.5, 0.9, 0.9, 0.1]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(scores in proptest::collection::vec(0.0f64..1.0, 1..30), scale in 0.001f64..1000.0) {
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(select_best(&scores), select_best(&scaled));
        }
    }
}

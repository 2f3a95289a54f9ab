//! Second-order gradient-boosted trees with logistic loss. Multi-output
//! models grow one tree per round with a vector of leaf values.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prep::sigmoid;
use crate::tree::{build_tree, Binner, Newton, Tree, TreeParams, DEFAULT_MAX_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub lambda: f64,
    pub min_child_weight: f64,
    /// Row fraction sampled without replacement per round.
    pub subsample: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: 6,
            lambda: 1.0,
            min_child_weight: 1.0,
            subsample: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbt {
    pub base_margin: Vec<f64>,
    pub trees: Vec<Tree>,
}

const MARGIN_CLAMP: f64 = 10.0;

impl Gbt {
    pub fn fit(x: ArrayView2<f64>, y: ArrayView2<u8>, w: ArrayView2<f64>, params: &GbtParams, seed: u64) -> Self {
        let (n, k) = y.dim();
        let binner = Binner::fit(x, DEFAULT_MAX_BINS);
        let binned = binner.transform(x);
        let base_margin: Vec<f64> = (0..k)
            .map(|j| {
                let (mut wp, mut wn) = (0.0, 0.0);
                for i in 0..n {
                    if y[[i, j]] == 1 { wp += w[[i, j]] } else { wn += w[[i, j]] }
                }
                if wp == 0.0 || wn == 0.0 {
                    if wp == 0.0 { -MARGIN_CLAMP } else { MARGIN_CLAMP }
                } else {
                    (wp / wn).ln().clamp(-MARGIN_CLAMP, MARGIN_CLAMP)
                }
            })
            .collect();
        let mut margin = Array2::from_shape_fn((n, k), |(_, j)| base_margin[j]);
        let crit = Newton {
            lambda: params.lambda,
            min_child_weight: params.min_child_weight,
            learning_rate: params.learning_rate,
        };
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_samples_leaf: 1,
            max_features: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = vec![0.0; n * k * 2];
        let mut trees = Vec::with_capacity(params.n_estimators);
        for _ in 0..params.n_estimators {
            for i in 0..n {
                for j in 0..k {
                    let p = sigmoid(margin[[i, j]]);
                    let o = (i * k + j) * 2;
                    stats[o] = w[[i, j]] * (p - f64::from(y[[i, j]]));
                    stats[o + 1] = (w[[i, j]] * p * (1.0 - p)).max(1e-16);
                }
            }
            let rows: Vec<u32> = if params.subsample < 1.0 {
                let m = ((params.subsample * n as f64).round() as usize).clamp(1, n);
                let mut r: Vec<u32> = sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect();
                r.sort_unstable();
                r
            } else {
                (0..n as u32).collect()
            };
            let tree = build_tree(&crit, &binner, &binned, &stats, 2 * k, rows, &tree_params, &mut rng);
            for (i, row) in x.rows().into_iter().enumerate() {
                for (m, v) in margin.row_mut(i).iter_mut().zip(tree.leaf(row)) {
                    *m += v;
                }
            }
            trees.push(tree);
        }
        Gbt { base_margin, trees }
    }

    pub fn predict_margin(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let k = self.base_margin.len();
        let mut out = Array2::from_shape_fn((x.nrows(), k), |(_, j)| self.base_margin[j]);
        for (i, row) in x.rows().into_iter().enumerate() {
            for t in &self.trees {
                for (o, v) in out.row_mut(i).iter_mut().zip(t.leaf(row)) {
                    *o += v;
                }
            }
        }
        out
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.predict_margin(x).mapv(sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Weighted logistic loss, used to check that boosting descends.
    fn loss(p: &Array2<f64>, y: &Array2<u8>) -> f64 {
        p.iter()
            .zip(y.iter())
            .map(|(p, &y)| -(if y == 1 { p.max(1e-15).ln() } else { (1.0 - p).max(1e-15).ln() }))
            .sum()
    }

    #[test]
    fn training_loss_decreases_with_rounds() {
        let n = 150;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 13 + j * 7) % 29) as f64);
        let y = Array2::from_shape_fn((n, 2), |(i, j)| u8::from(if j == 0 { x[[i, 0]] > 14.0 } else { x[[i, 1]] < 8.0 }));
        let w = Array2::ones((n, 2));
        let mut last = f64::INFINITY;
        for rounds in [1, 5, 20] {
            let m = Gbt::fit(x.view(), y.view(), w.view(), &GbtParams { n_estimators: rounds, max_depth: 2, ..Default::default() }, 0);
            let l = loss(&m.predict_proba(x.view()), &y);
            assert!(l < last, "{rounds}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn single_stump_matches_closed_form() {
        // One feature, one split, lambda 0: leaf = -eta · G / H at margin 0.
        let x = Array2::from_shape_fn((4, 1), |(i, _)| i as f64);
        let y = Array2::from_shape_fn((4, 1), |(i, _)| u8::from(i >= 2));
        let w = Array2::ones((4, 1));
        let params = GbtParams { n_estimators: 1, learning_rate: 1.0, max_depth: 1, lambda: 0.0, min_child_weight: 0.0, subsample: 1.0 };
        let m = Gbt::fit(x.view(), y.view(), w.view(), &params, 0);
        assert_eq!(m.base_margin, vec![0.0]);
        // Left: two negatives at p = 0.5 → G = 1, H = 0.5 → leaf -2.
        let margins = m.predict_margin(x.view());
        assert!((margins[[0, 0]] + 2.0).abs() < 1e-12);
        assert!((margins[[3, 0]] - 2.0).abs() < 1e-12);
    }
}

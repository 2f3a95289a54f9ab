//! Random forest over one or more binary outputs.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tree::{build_tree, Binner, Gini, Tree, TreeParams, DEFAULT_MAX_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Fraction(f64),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((d as f64).sqrt().round() as usize).max(1),
            MaxFeatures::All => d,
            MaxFeatures::Fraction(f) => ((f * d as f64).round() as usize).clamp(1, d.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    /// 0 means unlimited.
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_estimators: 100,
            max_depth: 0,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_outputs: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// `y` and `w` are n × outputs; `w` holds each sample's weight per output.
    /// Tree `t` draws from its own RNG stream, so results do not depend on
    /// thread scheduling.
    pub fn fit(x: ArrayView2<f64>, y: ArrayView2<u8>, w: ArrayView2<f64>, params: &ForestParams, seed: u64) -> Self {
        let (n, k) = y.dim();
        let binner = Binner::fit(x, DEFAULT_MAX_BINS);
        let binned = binner.transform(x);
        let mut stats = Vec::with_capacity(n * k * 2);
        for i in 0..n {
            for j in 0..k {
                stats.push(w[[i, j]] * f64::from(y[[i, j]]));
                stats.push(w[[i, j]]);
            }
        }
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf,
            max_features: Some(params.max_features.resolve(x.ncols())),
        };
        let trees = (0..params.n_estimators)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let rows: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
                build_tree(&Gini, &binner, &binned, &stats, 2 * k, rows, &tree_params, &mut rng)
            })
            .collect();
        Forest { n_outputs: k, trees }
    }

    /// Mean of per-tree leaf positive fractions.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.n_outputs));
        for (i, row) in x.rows().into_iter().enumerate() {
            for t in &self.trees {
                for (o, v) in out.row_mut(i).iter_mut().zip(t.leaf(row)) {
                    *o += v;
                }
            }
        }
        out /= self.trees.len().max(1) as f64;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_threshold_and_is_deterministic() {
        let n = 200;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| ((i * (j + 3)) % 17) as f64 + if j == 0 { i as f64 } else { 0.0 });
        let y = Array2::from_shape_fn((n, 2), |(i, j)| u8::from(if j == 0 { i >= 100 } else { i % 2 == 0 && i >= 50 }));
        let w = Array2::ones((n, 2));
        let params = ForestParams { n_estimators: 20, ..Default::default() };
        let f = Forest::fit(x.view(), y.view(), w.view(), &params, 3);
        let p = f.predict_proba(x.view());
        let acc = (0..n).filter(|&i| (p[[i, 0]] >= 0.5) == (y[[i, 0]] == 1)).count();
        assert!(acc as f64 / n as f64 > 0.95);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let g = Forest::fit(x.view(), y.view(), w.view(), &params, 3);
        assert_eq!(f, g);
    }

    #[test]
    fn max_features_resolution() {
        assert_eq!(MaxFeatures::Sqrt.resolve(100), 10);
        assert_eq!(MaxFeatures::Fraction(0.25).resolve(10), 3);
        assert_eq!(MaxFeatures::All.resolve(7), 7);
    }
}

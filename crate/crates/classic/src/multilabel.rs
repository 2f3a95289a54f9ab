//! Native multi-label tree ensembles selected by validation average precision.

use std::path::Path;

use codtox_core::embed::Backend;
use codtox_core::metrics::{hamming_loss, ranking_metrics};
use codtox_core::schema::{LabelSchema, LabelVector};
use codtox_core::split::SplitIndices;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::bundle::threshold_rows;
use crate::cv::select_best;
use crate::error::{ClassicError, Result};
use crate::forest::Forest;
use crate::gbt::Gbt;
use crate::grid::{describe, Architecture, Combination, HyperGrid};
use crate::model::{check_combination, forest_params, gbt_params};
use crate::prep::check_features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", content = "model", rename_all = "snake_case")]
pub enum MultiOutputModel {
    RandomForest(Forest),
    GradientBoostedTrees(Gbt),
}

impl MultiOutputModel {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            MultiOutputModel::RandomForest(m) => m.predict_proba(x),
            MultiOutputModel::GradientBoostedTrees(m) => m.predict_proba(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub combination: Combination,
    pub validation_average_precision: f64,
    pub validation_auroc: f64,
    pub validation_hamming_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelModel {
    pub architecture: Architecture,
    pub combination: Combination,
    pub schema: LabelSchema,
    pub schema_hash: String,
    pub embedding_backend: Backend,
    pub seed: u64,
    pub candidates: Vec<Candidate>,
    pub model: MultiOutputModel,
}

/// Balanced weights per output; an output with a single class gets unit weights.
pub fn multilabel_weights(y: ArrayView2<u8>) -> Array2<f64> {
    let (n, k) = y.dim();
    let mut w = Array2::ones((n, k));
    for j in 0..k {
        let pos = y.column(j).iter().filter(|&&v| v == 1).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        let wp = n as f64 / (2.0 * pos as f64);
        let wn = n as f64 / (2.0 * neg as f64);
        for i in 0..n {
            w[[i, j]] = if y[[i, j]] == 1 { wp } else { wn };
        }
    }
    w
}

fn fit_multi(architecture: Architecture, combo: &Combination, x: ArrayView2<f64>, y: ArrayView2<u8>, seed: u64) -> Result<MultiOutputModel> {
    let w = multilabel_weights(y);
    match architecture {
        Architecture::RandomForest => Ok(MultiOutputModel::RandomForest(Forest::fit(x, y, w.view(), &forest_params(combo)?, seed))),
        Architecture::GradientBoostedTrees => Ok(MultiOutputModel::GradientBoostedTrees(Gbt::fit(x, y, w.view(), &gbt_params(combo)?, seed))),
        other => Err(ClassicError::Config(format!("{other} has no native multi-label form"))),
    }
}

/// Fits every combination on the training rows and keeps the one with the
/// highest macro average precision on the validation rows.
pub fn train_native_multilabel(
    x: ArrayView2<f64>,
    gold: ArrayView2<u8>,
    split: &SplitIndices,
    schema: &LabelSchema,
    backend: Backend,
    grid: &HyperGrid,
    seed: u64,
) -> Result<MultiLabelModel> {
    if !grid.architecture.supports_multilabel() {
        return Err(ClassicError::Config(format!("{} has no native multi-label form", grid.architecture)));
    }
    if x.nrows() != gold.nrows() || gold.ncols() != schema.len() {
        return Err(ClassicError::Validation(format!("features {:?}, gold {:?}", x.dim(), gold.dim())));
    }
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(ClassicError::Validation("multi-label training needs train and validation rows".into()));
    }
    grid.validate()?;
    check_features(x)?;
    let combos = grid.combinations();
    for c in &combos {
        check_combination(grid.architecture, c)?;
    }
    let xt = x.select(Axis(0), &split.train);
    let yt = gold.select(Axis(0), &split.train);
    let xv = x.select(Axis(0), &split.validation);
    let yv = gold.select(Axis(0), &split.validation);
    let mut candidates = Vec::with_capacity(combos.len());
    let mut models = Vec::with_capacity(combos.len());
    for combo in combos {
        let model = fit_multi(grid.architecture, &combo, xt.view(), yt.view(), seed)?;
        let p = model.predict_proba(xv.view());
        let pred = p.mapv(|v| u8::from(v >= 0.5));
        let ranking = ranking_metrics(p.view(), yv.view())?;
        let c = Candidate {
            combination: combo,
            validation_average_precision: ranking.macro_average_precision.unwrap_or(f64::NAN),
            validation_auroc: ranking.macro_auroc.unwrap_or(f64::NAN),
            validation_hamming_loss: hamming_loss(pred.view(), yv.view())?,
        };
        tracing::info!(
            architecture = %grid.architecture,
            combination = %describe(&c.combination),
            ap = c.validation_average_precision,
            auroc = c.validation_auroc,
            hamming = c.validation_hamming_loss,
            "multi-label candidate"
        );
        candidates.push(c);
        models.push(model);
    }
    let aps: Vec<f64> = candidates.iter().map(|c| c.validation_average_precision).collect();
    let best = select_best(&aps)
        .ok_or_else(|| ClassicError::Training("validation average precision undefined for every class".into()))?;
    Ok(MultiLabelModel {
        architecture: grid.architecture,
        combination: candidates[best].combination.clone(),
        schema: schema.clone(),
        schema_hash: schema.hash(),
        embedding_backend: backend,
        seed,
        model: models.swap_remove(best),
        candidates,
    })
}

impl MultiLabelModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> (Vec<LabelVector>, Array2<f64>) {
        let scores = if x.nrows() == 0 {
            Array2::zeros((0, self.schema.len()))
        } else {
            self.model.predict_proba(x)
        };
        (threshold_rows(&scores), scores)
    }

    pub fn selected(&self) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.combination == self.combination)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| ClassicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClassicError::io(path, e))?;
        let m: MultiLabelModel = serde_json::from_str(&text)?;
        if m.schema.hash() != m.schema_hash {
            return Err(ClassicError::Validation("model schema hash does not match its schema".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weights_per_output() {
        let y = array![[1u8, 0], [0, 0], [0, 0], [0, 0]];
        let w = multilabel_weights(y.view());
        assert_eq!(w.column(0).to_vec(), vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(w.column(1).to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn rejects_non_tree_architecture() {
        let schema = LabelSchema::new(vec!["a".into()], vec![], 1).unwrap();
        let x = Array2::<f64>::zeros((4, 1));
        let y = Array2::<u8>::zeros((4, 1));
        let split = SplitIndices { train: vec![0, 1], validation: vec![2], test: vec![3] };
        let grid = HyperGrid::default_for(Architecture::LogisticRegression);
        assert!(matches!(
            train_native_multilabel(x.view(), y.view(), &split, &schema, Backend::Static, &grid, 0),
            Err(ClassicError::Config(_))
        ));
    }
}

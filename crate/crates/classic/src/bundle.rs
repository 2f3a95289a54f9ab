//! Per-drug binary classifier bundles and their combination into one
//! multi-label predictor.

use std::collections::BTreeMap;
use std::path::Path;

use codtox_core::embed::Backend;
use codtox_core::metrics::{auroc, confusion};
use codtox_core::schema::{LabelSchema, LabelVector};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cv::{grid_search_cv, select_best, CvResult, DEFAULT_FOLDS};
use crate::error::{ClassicError, Result};
use crate::grid::{describe, Architecture, Combination, HyperGrid, DEFAULT_GRID_VERSION};
use crate::model::BinaryModel;
use crate::prep::{balanced_weights, check_features};

pub const BUNDLE_FORMAT: u32 = 1;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    /// Searched in order; ties across architectures go to the earlier grid.
    pub grids: Vec<HyperGrid>,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    pub seed: u64,
    /// Classes left without a model (their columns predict 0).
    #[serde(default)]
    pub skip_classes: Vec<String>,
    #[serde(default = "default_grid_version")]
    pub grid_version: String,
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_grid_version() -> String {
    DEFAULT_GRID_VERSION.to_string()
}

impl BundleConfig {
    pub fn with_default_grids(seed: u64) -> Self {
        BundleConfig {
            grids: Architecture::ALL.iter().map(|&a| HyperGrid::default_for(a)).collect(),
            n_folds: DEFAULT_FOLDS,
            seed,
            skip_classes: Vec::new(),
            grid_version: DEFAULT_GRID_VERSION.to_string(),
        }
    }
}

/// Training and held-out rows for one class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassRows {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSearch {
    pub architecture: Architecture,
    pub best_index: usize,
    pub results: Vec<CvResult>,
}

/// Binary-task scores on the class's own held-out rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutScores {
    pub n: usize,
    pub auroc: Option<f64>,
    /// F1 of the positive class.
    pub f1_positive: f64,
    /// Mean of positive- and negative-class F1.
    pub f1_binary_macro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: String,
    pub architecture: Architecture,
    pub combination: Combination,
    pub cv_mean_auroc: f64,
    pub fold_fingerprint: String,
    pub n_train: usize,
    pub searches: Vec<ArchitectureSearch>,
    pub holdout: Option<HoldoutScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub selection: ClassSelection,
    pub model: BinaryModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryClassifierBundle {
    pub schema: LabelSchema,
    pub embedding_backend: Backend,
    pub seed: u64,
    pub grid_version: String,
    pub per_class: BTreeMap<String, ClassModel>,
    pub skipped: Vec<String>,
    /// Classes whose search failed, with the error.
    pub failures: BTreeMap<String, String>,
}

/// Searches every grid for one class and refits the winner on all its rows.
pub fn train_class(
    x: ArrayView2<f64>,
    y: &[u8],
    class: &str,
    config: &BundleConfig,
) -> Result<ClassModel> {
    let mut searches = Vec::with_capacity(config.grids.len());
    let mut fingerprint = String::new();
    for grid in &config.grids {
        let out = grid_search_cv(x, y, grid, config.n_folds, config.seed)?;
        if !fingerprint.is_empty() && fingerprint != out.fold_fingerprint {
            return Err(ClassicError::Training("fold assignment changed between grids".into()));
        }
        fingerprint = out.fold_fingerprint.clone();
        searches.push(ArchitectureSearch {
            architecture: grid.architecture,
            best_index: out.best_index,
            results: out.results,
        });
    }
    let bests: Vec<f64> = searches.iter().map(|s| s.results[s.best_index].mean_score).collect();
    let winner = select_best(&bests)
        .ok_or_else(|| ClassicError::Config("bundle config has no grids".into()))?;
    let chosen = &searches[winner];
    let best = &chosen.results[chosen.best_index];
    let w = balanced_weights(y)?;
    let model = BinaryModel::fit(chosen.architecture, &best.combination, x, y, &w, config.seed)?;
    tracing::info!(
        class,
        architecture = %chosen.architecture,
        combination = %describe(&best.combination),
        cv_auroc = best.mean_score,
        "selected"
    );
    Ok(ClassModel {
        selection: ClassSelection {
            class: class.to_string(),
            architecture: chosen.architecture,
            combination: best.combination.clone(),
            cv_mean_auroc: best.mean_score,
            fold_fingerprint: fingerprint,
            n_train: y.len(),
            searches,
            holdout: None,
        },
        model,
    })
}

fn holdout_scores(model: &BinaryModel, x: ArrayView2<f64>, y: &[u8]) -> HoldoutScores {
    let p = model.predict_proba(x);
    let pred: Vec<u8> = p.iter().map(|&v| u8::from(v >= DECISION_THRESHOLD)).collect();
    let pm = Array2::from_shape_vec((pred.len(), 1), pred).unwrap();
    let gm = Array2::from_shape_vec((y.len(), 1), y.to_vec()).unwrap();
    let pos = confusion(&pm.view(), &gm.view(), 0, 1).f1();
    let neg = confusion(&pm.view(), &gm.view(), 0, 0).f1();
    HoldoutScores {
        n: y.len(),
        auroc: auroc(&p, y),
        f1_positive: pos,
        f1_binary_macro: (pos + neg) / 2.0,
    }
}

/// Trains one model per schema class on that class's rows of `x`.
///
/// A failing class is recorded in `failures` and does not stop the others.
pub fn train_per_drug_bundle(
    x: ArrayView2<f64>,
    gold: ArrayView2<u8>,
    schema: &LabelSchema,
    backend: Backend,
    rows: &BTreeMap<String, ClassRows>,
    config: &BundleConfig,
) -> Result<BinaryClassifierBundle> {
    if x.nrows() != gold.nrows() || gold.ncols() != schema.len() {
        return Err(ClassicError::Validation(format!(
            "features {:?}, gold {:?}, schema of {}",
            x.dim(),
            gold.dim(),
            schema.len()
        )));
    }
    check_features(x)?;
    for s in &config.skip_classes {
        if schema.index_of(s).is_none() {
            return Err(ClassicError::Config(format!("skip_classes names unknown class `{s}`")));
        }
    }
    let mut bundle = BinaryClassifierBundle {
        schema: schema.clone(),
        embedding_backend: backend,
        seed: config.seed,
        grid_version: config.grid_version.clone(),
        per_class: BTreeMap::new(),
        skipped: config.skip_classes.clone(),
        failures: BTreeMap::new(),
    };
    for (j, class) in schema.classes.iter().enumerate() {
        if config.skip_classes.contains(class) {
            continue;
        }
        let Some(r) = rows.get(class) else {
            bundle.failures.insert(class.clone(), "no training rows given".into());
            continue;
        };
        let xt = x.select(Axis(0), &r.train);
        let yt: Vec<u8> = r.train.iter().map(|&i| gold[[i, j]]).collect();
        match train_class(xt.view(), &yt, class, config) {
            Ok(mut cm) => {
                if !r.test.is_empty() {
                    let yv: Vec<u8> = r.test.iter().map(|&i| gold[[i, j]]).collect();
                    cm.selection.holdout = Some(holdout_scores(&cm.model, x.select(Axis(0), &r.test).view(), &yv));
                }
                bundle.per_class.insert(class.clone(), cm);
            }
            Err(e) => {
                tracing::warn!(class, error = %e, "class training failed");
                bundle.failures.insert(class.clone(), e.to_string());
            }
        }
    }
    Ok(bundle)
}

/// Scores every row with every class model. Decisions are `score >= 0.5`
/// per class, concatenated in schema order.
pub fn combine_bundle_predict(
    bundle: &BinaryClassifierBundle,
    x: ArrayView2<f64>,
) -> Result<(Vec<LabelVector>, Array2<f64>)> {
    let k = bundle.schema.len();
    let mut scores = Array2::zeros((x.nrows(), k));
    for (j, class) in bundle.schema.classes.iter().enumerate() {
        match bundle.per_class.get(class) {
            Some(cm) => {
                if x.nrows() > 0 {
                    let p = cm.model.predict_proba(x);
                    scores.column_mut(j).assign(&ndarray::Array1::from(p));
                }
            }
            None if bundle.skipped.contains(class) => {}
            None => {
                return Err(ClassicError::Config(format!("bundle has no model for class `{class}`")));
            }
        }
    }
    Ok((threshold_rows(&scores), scores))
}

pub(crate) fn threshold_rows(scores: &Array2<f64>) -> Vec<LabelVector> {
    scores
        .rows()
        .into_iter()
        .map(|r| LabelVector::new(r.iter().map(|&v| u8::from(v >= DECISION_THRESHOLD)).collect()).unwrap())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleManifest {
    format: u32,
    schema_hash: String,
    schema: LabelSchema,
    embedding_backend: Backend,
    seed: u64,
    grid_version: String,
    skipped: Vec<String>,
    failures: BTreeMap<String, String>,
    classes: BTreeMap<String, ClassSelection>,
}

impl BinaryClassifierBundle {
    /// Writes `manifest.json` plus `models/<class>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let models = dir.join("models");
        std::fs::create_dir_all(&models).map_err(|e| ClassicError::io(&models, e))?;
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT,
            schema_hash: self.schema.hash(),
            schema: self.schema.clone(),
            embedding_backend: self.embedding_backend,
            seed: self.seed,
            grid_version: self.grid_version.clone(),
            skipped: self.skipped.clone(),
            failures: self.failures.clone(),
            classes: self.per_class.iter().map(|(k, v)| (k.clone(), v.selection.clone())).collect(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| ClassicError::io(&path, e))?;
        for (class, cm) in &self.per_class {
            let path = models.join(format!("{class}.json"));
            std::fs::write(&path, serde_json::to_string(&cm.model)?).map_err(|e| ClassicError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| ClassicError::io(&path, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.format != BUNDLE_FORMAT {
            return Err(ClassicError::Config(format!("unsupported bundle format {}", m.format)));
        }
        if m.schema.hash() != m.schema_hash {
            return Err(ClassicError::Validation("bundle schema hash does not match its schema".into()));
        }
        let mut per_class = BTreeMap::new();
        for (class, selection) in m.classes {
            let path = dir.join("models").join(format!("{class}.json"));
            let text = std::fs::read_to_string(&path).map_err(|e| ClassicError::io(&path, e))?;
            let model: BinaryModel = serde_json::from_str(&text)?;
            per_class.insert(class, ClassModel { selection, model });
        }
        Ok(BinaryClassifierBundle {
            schema: m.schema,
            embedding_backend: m.embedding_backend,
            seed: m.seed,
            grid_version: m.grid_version,
            per_class,
            skipped: m.skipped,
            failures: m.failures,
        })
    }
}

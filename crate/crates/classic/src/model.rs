//! Architecture dispatch: building models from a hyperparameter combination.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ClassicError, Result};
use crate::forest::{Forest, ForestParams, MaxFeatures};
use crate::gbt::{Gbt, GbtParams};
use crate::grid::{get_f64, get_str, get_usize, Architecture, Combination, ParamValue};
use crate::logistic::LogisticModel;
use crate::svm::{make_kernel, Kernel, SvcModel};

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ClassicError::Config(format!("`{name}` must be positive, got {v}")))
    }
}

pub fn forest_params(combo: &Combination) -> Result<ForestParams> {
    let d = ForestParams::default();
    let max_features = match combo.get("max_features") {
        None => d.max_features,
        Some(ParamValue::Str(s)) if s == "sqrt" => MaxFeatures::Sqrt,
        Some(ParamValue::Str(s)) if s == "all" => MaxFeatures::All,
        Some(ParamValue::Float(f)) if *f > 0.0 && *f <= 1.0 => MaxFeatures::Fraction(*f),
        Some(other) => {
            return Err(ClassicError::Config(format!(
                "`max_features` must be \"sqrt\", \"all\" or a fraction in (0, 1], got `{other}`"
            )))
        }
    };
    let n_estimators = get_usize(combo, "n_estimators", d.n_estimators)?;
    if n_estimators == 0 {
        return Err(ClassicError::Config("`n_estimators` must be at least 1".into()));
    }
    Ok(ForestParams {
        n_estimators,
        max_depth: get_usize(combo, "max_depth", d.max_depth)?,
        min_samples_leaf: get_usize(combo, "min_samples_leaf", d.min_samples_leaf)?.max(1),
        max_features,
    })
}

pub fn gbt_params(combo: &Combination) -> Result<GbtParams> {
    let d = GbtParams::default();
    let subsample = get_f64(combo, "subsample", d.subsample)?;
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(ClassicError::Config(format!("`subsample` must be in (0, 1], got {subsample}")));
    }
    Ok(GbtParams {
        n_estimators: get_usize(combo, "n_estimators", d.n_estimators)?,
        learning_rate: positive("learning_rate", get_f64(combo, "learning_rate", d.learning_rate)?)?,
        max_depth: get_usize(combo, "max_depth", d.max_depth)?,
        lambda: get_f64(combo, "lambda", d.lambda)?.max(0.0),
        min_child_weight: get_f64(combo, "min_child_weight", d.min_child_weight)?.max(0.0),
        subsample,
    })
}

fn svc_kernel(combo: &Combination, n_features: usize) -> Result<Kernel> {
    let kind = match combo.get("kernel") {
        None => "rbf",
        Some(ParamValue::Str(s)) => s.as_str(),
        Some(other) => return Err(ClassicError::Config(format!("`kernel` must be a string, got `{other}`"))),
    };
    let gamma = match combo.get("gamma") {
        None => None,
        Some(ParamValue::Str(s)) if s == "scale" => None,
        Some(_) => Some(positive("gamma", get_f64(combo, "gamma", 0.0)?)?),
    };
    make_kernel(kind, gamma, n_features)
        .ok_or_else(|| ClassicError::Config(format!("unknown kernel `{kind}` (expected linear or rbf)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", content = "model", rename_all = "snake_case")]
pub enum BinaryModel {
    LogisticRegression(LogisticModel),
    GradientBoostedTrees(Gbt),
    RandomForest(Forest),
    SupportVector(SvcModel),
}

impl BinaryModel {
    /// Fits one binary model with per-sample weights `w`.
    pub fn fit(
        architecture: Architecture,
        combo: &Combination,
        x: ArrayView2<f64>,
        y: &[u8],
        w: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if x.nrows() != y.len() || y.len() != w.len() {
            return Err(ClassicError::Validation(format!(
                "{} feature rows, {} labels, {} weights",
                x.nrows(),
                y.len(),
                w.len()
            )));
        }
        Ok(match architecture {
            Architecture::LogisticRegression => {
                let c = positive("c", get_f64(combo, "c", 1.0)?)?;
                let max_iter = get_usize(combo, "max_iter", 200)?;
                BinaryModel::LogisticRegression(LogisticModel::fit(x, y, w, c, max_iter))
            }
            Architecture::SupportVector => {
                let c = positive("c", get_f64(combo, "c", 1.0)?)?;
                let kernel = svc_kernel(combo, x.ncols())?;
                BinaryModel::SupportVector(SvcModel::fit(x, y, w, c, kernel))
            }
            Architecture::RandomForest => {
                let (yy, ww) = column(y, w);
                BinaryModel::RandomForest(Forest::fit(x, yy.view(), ww.view(), &forest_params(combo)?, seed))
            }
            Architecture::GradientBoostedTrees => {
                let (yy, ww) = column(y, w);
                BinaryModel::GradientBoostedTrees(Gbt::fit(x, yy.view(), ww.view(), &gbt_params(combo)?, seed))
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            BinaryModel::LogisticRegression(_) => Architecture::LogisticRegression,
            BinaryModel::GradientBoostedTrees(_) => Architecture::GradientBoostedTrees,
            BinaryModel::RandomForest(_) => Architecture::RandomForest,
            BinaryModel::SupportVector(_) => Architecture::SupportVector,
        }
    }

    /// Probability of the positive class, one per row.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        match self {
            BinaryModel::LogisticRegression(m) => m.predict_proba(x),
            BinaryModel::SupportVector(m) => m.predict_proba(x),
            BinaryModel::RandomForest(m) => m.predict_proba(x).column(0).to_vec(),
            BinaryModel::GradientBoostedTrees(m) => m.predict_proba(x).column(0).to_vec(),
        }
    }
}

fn column(y: &[u8], w: &[f64]) -> (Array2<u8>, Array2<f64>) {
    (
        Array2::from_shape_vec((y.len(), 1), y.to_vec()).unwrap(),
        Array2::from_shape_vec((w.len(), 1), w.to_vec()).unwrap(),
    )
}

/// Validates a combination without training, so grid errors surface early.
pub fn check_combination(architecture: Architecture, combo: &Combination) -> Result<()> {
    match architecture {
        Architecture::LogisticRegression => {
            positive("c", get_f64(combo, "c", 1.0)?)?;
            get_usize(combo, "max_iter", 200)?;
        }
        Architecture::SupportVector => {
            positive("c", get_f64(combo, "c", 1.0)?)?;
            svc_kernel(combo, 1)?;
        }
        Architecture::RandomForest => {
            forest_params(combo)?;
        }
        Architecture::GradientBoostedTrees => {
            gbt_params(combo)?;
        }
    }
    if let Some(k) = get_str(combo, "kernel") {
        if architecture != Architecture::SupportVector {
            return Err(ClassicError::Config(format!("`kernel={k}` only applies to support_vector")));
        }
    }
    Ok(())
}

//! Hyperparameter grids and their enumeration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ClassicError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LogisticRegression,
    GradientBoostedTrees,
    RandomForest,
    SupportVector,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::LogisticRegression,
        Architecture::GradientBoostedTrees,
        Architecture::RandomForest,
        Architecture::SupportVector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::LogisticRegression => "logistic_regression",
            Architecture::GradientBoostedTrees => "gradient_boosted_trees",
            Architecture::RandomForest => "random_forest",
            Architecture::SupportVector => "support_vector",
        }
    }

    /// Parameter names accepted by this architecture.
    pub fn parameters(self) -> &'static [&'static str] {
        match self {
            Architecture::LogisticRegression => &["c", "max_iter"],
            Architecture::SupportVector => &["c", "kernel", "gamma"],
            Architecture::RandomForest => {
                &["n_estimators", "max_depth", "min_samples_leaf", "max_features"]
            }
            Architecture::GradientBoostedTrees => &[
                "n_estimators",
                "learning_rate",
                "max_depth",
                "lambda",
                "min_child_weight",
                "subsample",
            ],
        }
    }

    pub fn supports_multilabel(self) -> bool {
        matches!(self, Architecture::RandomForest | Architecture::GradientBoostedTrees)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Str(v) => f.write_str(v),
        }
    }
}

/// One assignment of every grid parameter.
pub type Combination = BTreeMap<String, ParamValue>;

pub fn describe(combo: &Combination) -> String {
    combo
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn get_f64(combo: &Combination, key: &str, default: f64) -> Result<f64> {
    match combo.get(key) {
        None => Ok(default),
        Some(ParamValue::Float(v)) => Ok(*v),
        Some(ParamValue::Int(v)) => Ok(*v as f64),
        Some(ParamValue::Str(s)) => Err(ClassicError::Config(format!("`{key}` must be numeric, got `{s}`"))),
    }
}

pub(crate) fn get_usize(combo: &Combination, key: &str, default: usize) -> Result<usize> {
    match combo.get(key) {
        None => Ok(default),
        Some(ParamValue::Int(v)) if *v >= 0 => Ok(*v as usize),
        Some(ParamValue::Float(v)) if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
        Some(other) => Err(ClassicError::Config(format!(
            "`{key}` must be a non-negative integer, got `{other}`"
        ))),
    }
}

pub(crate) fn get_str<'a>(combo: &'a Combination, key: &str) -> Option<&'a str> {
    match combo.get(key) {
        Some(ParamValue::Str(s)) => Some(s),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub architecture: Architecture,
    pub grid: BTreeMap<String, Vec<ParamValue>>,
}

pub const DEFAULT_GRID_VERSION: &str = "grids-v1";

impl HyperGrid {
    pub fn new(architecture: Architecture, grid: BTreeMap<String, Vec<ParamValue>>) -> Result<Self> {
        let g = HyperGrid { architecture, grid };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let known = self.architecture.parameters();
        for (name, values) in &self.grid {
            if !known.contains(&name.as_str()) {
                return Err(ClassicError::Config(format!(
                    "{} has no parameter `{name}` (expected one of {})",
                    self.architecture,
                    known.join(", ")
                )));
            }
            if values.is_empty() {
                return Err(ClassicError::Config(format!("grid parameter `{name}` has no candidates")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.values().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All combinations, last key varying fastest. An empty grid yields one
    /// combination (all defaults).
    pub fn combinations(&self) -> Vec<Combination> {
        let mut out = vec![Combination::new()];
        for (name, values) in &self.grid {
            let mut next = Vec::with_capacity(out.len() * values.len());
            for partial in &out {
                for v in values {
                    let mut c = partial.clone();
                    c.insert(name.clone(), v.clone());
                    next.push(c);
                }
            }
            out = next;
        }
        out
    }

    /// The shipped default grid for `architecture`.
    pub fn default_for(architecture: Architecture) -> Self {
        use ParamValue::*;
        let grid: BTreeMap<String, Vec<ParamValue>> = match architecture {
            Architecture::LogisticRegression => [
                ("c", vec![Float(0.01), Float(0.1), Float(1.0), Float(10.0), Float(100.0)]),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            Architecture::SupportVector => [
                ("c", vec![Float(0.1), Float(1.0), Float(10.0)]),
                ("kernel", vec![Str("linear".into()), Str("rbf".into())]),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            Architecture::RandomForest => [
                ("max_depth", vec![Int(10), Int(0)]),
                ("max_features", vec![Str("sqrt".into())]),
                ("min_samples_leaf", vec![Int(1), Int(4)]),
                ("n_estimators", vec![Int(100), Int(300)]),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            Architecture::GradientBoostedTrees => [
                ("learning_rate", vec![Float(0.05), Float(0.1), Float(0.3)]),
                ("max_depth", vec![Int(3), Int(6)]),
                ("n_estimators", vec![Int(100), Int(200)]),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        };
        HyperGrid { architecture, grid }
    }

    pub fn single(architecture: Architecture, combo: &[(&str, ParamValue)]) -> Result<Self> {
        HyperGrid::new(
            architecture,
            combo.iter().map(|(k, v)| (k.to_string(), vec![v.clone()])).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_order_and_count() {
        let g = HyperGrid::default_for(Architecture::SupportVector);
        let combos = g.combinations();
        assert_eq!(combos.len(), 6);
        assert_eq!(g.len(), 6);
        assert_eq!(describe(&combos[0]), "c=0.1,kernel=linear");
        assert_eq!(describe(&combos[1]), "c=0.1,kernel=rbf");
        assert_eq!(describe(&combos[5]), "c=10,kernel=rbf");
    }

    #[test]
    fn every_default_grid_validates() {
        for a in Architecture::ALL {
            HyperGrid::default_for(a).validate().unwrap();
        }
    }

    #[test]
    fn unknown_parameter_rejected() {
        let mut grid = BTreeMap::new();
        grid.insert("alpha".to_string(), vec![ParamValue::Float(1.0)]);
        assert!(HyperGrid::new(Architecture::LogisticRegression, grid).is_err());
    }

    #[test]
    fn empty_grid_is_one_default_combination() {
        let g = HyperGrid::new(Architecture::RandomForest, BTreeMap::new()).unwrap();
        assert_eq!(g.combinations(), vec![Combination::new()]);
    }

    #[test]
    fn json_values_untagged() {
        let g: HyperGrid = serde_json::from_str(
            r#"{"architecture":"support_vector","grid":{"c":[1,0.5],"kernel":["rbf"]}}"#,
        )
        .unwrap();
        let combos = g.combinations();
        assert_eq!(get_f64(&combos[0], "c", 0.0).unwrap(), 1.0);
        assert_eq!(get_f64(&combos[1], "c", 0.0).unwrap(), 0.5);
        assert_eq!(get_str(&combos[0], "kernel"), Some("rbf"));
    }
}

//! Classic classifiers over document vectors.
//!
//! Per-drug binary models (logistic regression, kernel SVC, random forest,
//! gradient-boosted trees) are chosen per class by stratified 10-fold grid
//! search on AUROC with balanced class weights, refit on the class's training
//! rows, and combined into one multi-label predictor. Random forests and
//! boosted trees also train natively on the full label matrix.

pub mod bundle;
pub mod cv;
pub mod error;
pub mod forest;
pub mod gbt;
pub mod grid;
pub mod lbfgs;
pub mod logistic;
pub mod model;
pub mod multilabel;
pub mod prep;
pub mod svm;
pub mod tree;

pub use bundle::{
    combine_bundle_predict, train_per_drug_bundle, BinaryClassifierBundle, BundleConfig, ClassRows,
    DECISION_THRESHOLD,
};
pub use cv::{grid_search_cv, stratified_folds, CvResult, GridSearchOutcome};
pub use error::{ClassicError, Result};
pub use grid::{Architecture, Combination, HyperGrid, ParamValue};
pub use model::BinaryModel;
pub use multilabel::{train_native_multilabel, MultiLabelModel};

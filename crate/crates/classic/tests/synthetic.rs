use std::collections::BTreeMap;
use std::time::Instant;

use codtox_classic::grid::ParamValue::{Float, Int, Str};
use codtox_classic::{
    combine_bundle_predict, grid_search_cv, train_native_multilabel, train_per_drug_bundle, Architecture, BinaryModel,
    BundleConfig, ClassRows, HyperGrid, ParamValue,
};
use codtox_core::embed::{Backend, DocumentEmbedder, StaticEmbedder};
use codtox_core::metrics::{hamming_loss, macro_f1, F1Mode};
use codtox_core::schema::{label_matrix, LabelSchema};
use codtox_core::split::{split_keys, SplitStrategy};
use codtox_core::synth::{generate_cases, synthetic_word_vectors, SynthConfig};
use codtox_core::text::StopList;
use codtox_core::LabeledCase;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Corpus {
    cases: Vec<LabeledCase>,
    x: Array2<f64>,
    gold: Array2<u8>,
}

fn corpus(n: usize) -> Corpus {
    let cases = generate_cases(&SynthConfig { n_cases: n, ..Default::default() }, &StopList::default()).unwrap();
    let embedder = StaticEmbedder { table: synthetic_word_vectors(24, 5) };
    let texts: Vec<&str> = cases.iter().map(|c| c.normalized_text.as_str()).collect();
    let x = embedder.embed_matrix(&texts).unwrap();
    let rows: Vec<_> = cases.iter().map(|c| c.gold.clone()).collect();
    let gold = label_matrix(&rows, 10).unwrap();
    Corpus { cases, x, gold }
}

fn grid(a: Architecture, pairs: &[(&str, Vec<ParamValue>)]) -> HyperGrid {
    HyperGrid::new(a, pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()).unwrap()
}

fn small_grids() -> Vec<HyperGrid> {
    vec![
        grid(Architecture::LogisticRegression, &[("c", vec![Float(1.0), Float(100.0)])]),
        grid(Architecture::GradientBoostedTrees, &[("n_estimators", vec![Int(40)]), ("max_depth", vec![Int(3)])]),
        grid(Architecture::RandomForest, &[("n_estimators", vec![Int(40)])]),
        grid(Architecture::SupportVector, &[("c", vec![Float(10.0)]), ("kernel", vec![Str("rbf".into())])]),
    ]
}

#[test]
fn separable_data_reaches_perfect_auroc_for_every_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200;
    let x = Array2::from_shape_fn((n, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
    let y: Vec<u8> = (0..n).map(|i| u8::from(x[[i, 0]] - 0.5 * x[[i, 2]] > 0.1)).collect();
    for a in Architecture::ALL {
        let g = match a {
            Architecture::RandomForest | Architecture::GradientBoostedTrees => grid(a, &[("n_estimators", vec![Int(30)])]),
            Architecture::SupportVector => grid(a, &[("kernel", vec![Str("linear".into())]), ("c", vec![Float(100.0)])]),
            Architecture::LogisticRegression => grid(a, &[("c", vec![Float(1000.0)])]),
        };
        // Separate clearly: drop points near the boundary.
        let keep: Vec<usize> = (0..n).filter(|&i| (x[[i, 0]] - 0.5 * x[[i, 2]] - 0.1).abs() > 0.15).collect();
        let xs = x.select(Axis(0), &keep);
        let ys: Vec<u8> = keep.iter().map(|&i| y[i]).collect();
        let out = grid_search_cv(xs.view(), &ys, &g, 10, 3).unwrap();
        if matches!(a, Architecture::LogisticRegression | Architecture::SupportVector) {
            assert_eq!(out.best().mean_score, 1.0, "{a}");
        } else {
            assert!(out.best().mean_score > 0.99, "{a}: {}", out.best().mean_score);
        }
    }
}

/// Monte Carlo permutation null: features carry no signal about y.
///
/// Rows must be distinct. On the generated corpus many documents repeat, and
/// cross-validation under permutation then anti-learns (held-out duplicates
/// see the complementary labels in training), pulling AUROC well below 0.5.
#[test]
fn permuted_features_give_chance_auroc() {
    let c = corpus(600);
    let y: Vec<u8> = c.gold.column(4).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let jitter = Array2::from_shape_fn(c.x.dim(), |_| rng.random::<f64>() - 0.5);
    let x = &c.x + &jitter;
    let g = grid(Architecture::LogisticRegression, &[("c", vec![Float(1.0)])]);
    let trials = 5;
    let mut total = 0.0;
    for t in 0..trials {
        let mut perm: Vec<usize> = (0..y.len()).collect();
        perm.shuffle(&mut rng);
        let xp = x.select(Axis(0), &perm);
        total += grid_search_cv(xp.view(), &y, &g, 10, t).unwrap().best().mean_score;
    }
    let m = total / trials as f64;
    assert!((m - 0.5).abs() <= 0.1, "mean AUROC {m}");
}

#[test]
fn fold_assignment_shared_across_combinations_and_grids() {
    let c = corpus(400);
    let y: Vec<u8> = c.gold.column(9).to_vec();
    let a = grid_search_cv(c.x.view(), &y, &grid(Architecture::LogisticRegression, &[("c", vec![Float(0.1), Float(10.0)])]), 10, 7).unwrap();
    let b = grid_search_cv(c.x.view(), &y, &grid(Architecture::RandomForest, &[("n_estimators", vec![Int(10)])]), 10, 7).unwrap();
    assert_eq!(a.fold_fingerprint, b.fold_fingerprint);
    let d = grid_search_cv(c.x.view(), &y, &grid(Architecture::LogisticRegression, &[("c", vec![Float(0.1)])]), 10, 8).unwrap();
    assert_ne!(a.fold_fingerprint, d.fold_fingerprint);
}

fn class_rows(c: &Corpus, pool: &[usize], schema: &LabelSchema, seed: u64) -> BTreeMap<String, ClassRows> {
    let keys: Vec<String> = pool.iter().map(|&i| c.cases[i].key()).collect();
    let mut out = BTreeMap::new();
    for (j, class) in schema.classes.iter().enumerate() {
        let target: Vec<u8> = pool.iter().map(|&i| c.gold[[i, j]]).collect();
        let s = split_keys(&keys, Some(&target), SplitStrategy::Stratified8020, seed).unwrap();
        let pos: std::collections::HashMap<&str, usize> = keys.iter().enumerate().map(|(p, k)| (k.as_str(), pool[p])).collect();
        out.insert(
            class.clone(),
            ClassRows {
                train: s.train.iter().map(|k| pos[k.as_str()]).collect(),
                test: s.test.iter().map(|k| pos[k.as_str()]).collect(),
            },
        );
    }
    out
}

#[test]
fn per_drug_bundle_and_native_multilabel_on_synthetic_corpus() {
    let started = Instant::now();
    let c = corpus(2000);
    let schema = LabelSchema::default();
    let keys: Vec<String> = c.cases.iter().map(|k| k.key()).collect();
    let split = split_keys(&keys, None, SplitStrategy::Random602020, 3).unwrap();
    let idx = {
        let cases = &c.cases;
        split.indices(cases).unwrap()
    };
    let pool: Vec<usize> = idx.train.iter().chain(&idx.validation).copied().collect();
    let rows = class_rows(&c, &pool, &schema, 3);
    let config = BundleConfig { grids: small_grids(), ..BundleConfig::with_default_grids(3) };
    let bundle = train_per_drug_bundle(c.x.view(), c.gold.view(), &schema, Backend::Static, &rows, &config).unwrap();
    assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
    assert_eq!(bundle.per_class.len(), 10);
    for cm in bundle.per_class.values() {
        let h = cm.selection.holdout.as_ref().unwrap();
        assert!(h.f1_positive >= 0.95, "{}: {h:?}", cm.selection.class);
    }
    let xt = c.x.select(Axis(0), &idx.test);
    let gt = c.gold.select(Axis(0), &idx.test);
    let (labels, scores) = combine_bundle_predict(&bundle, xt.view()).unwrap();
    assert!(scores.iter().all(|v| (0.0..=1.0).contains(v)));
    let pred = label_matrix(&labels, 10).unwrap();
    let f1 = macro_f1(pred.view(), gt.view(), F1Mode::OverLabels).unwrap();
    assert!(f1 >= 0.95, "combined macro F1 {f1}");

    let g = grid(Architecture::GradientBoostedTrees, &[("n_estimators", vec![Int(60)]), ("max_depth", vec![Int(3)])]);
    let ml = train_native_multilabel(c.x.view(), c.gold.view(), &idx, &schema, Backend::Static, &g, 3).unwrap();
    let sel = ml.selected().unwrap();
    assert!(sel.validation_hamming_loss <= 0.02, "{sel:?}");
    let (labels, _) = ml.predict(xt.view());
    let hl = hamming_loss(label_matrix(&labels, 10).unwrap().view(), gt.view()).unwrap();
    assert!(hl <= 0.02, "test Hamming {hl}");
    eprintln!("synthetic pipeline: macro F1 {f1:.4}, Hamming {hl:.4}, {:?}", started.elapsed());
}

#[test]
fn training_is_deterministic() {
    let c = corpus(300);
    let y: Vec<u8> = c.gold.column(2).to_vec();
    for g in small_grids() {
        let a = grid_search_cv(c.x.view(), &y, &g, 10, 21).unwrap();
        let b = grid_search_cv(c.x.view(), &y, &g, 10, 21).unwrap();
        assert_eq!(a, b);
        let w = vec![1.0; y.len()];
        let combo = &a.best().combination;
        let m1 = BinaryModel::fit(g.architecture, combo, c.x.view(), &y, &w, 21).unwrap();
        let m2 = BinaryModel::fit(g.architecture, combo, c.x.view(), &y, &w, 21).unwrap();
        assert_eq!(m1.predict_proba(c.x.view()), m2.predict_proba(c.x.view()));
    }
}

mod leakage {
    use super::*;
    use codtox_classic::bundle::{BinaryClassifierBundle, ClassModel};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn fitted() -> &'static (BinaryClassifierBundle, Array2<f64>) {
        static CELL: OnceLock<(BinaryClassifierBundle, Array2<f64>)> = OnceLock::new();
        CELL.get_or_init(|| {
            let c = corpus(500);
            let schema = LabelSchema::default();
            let all: Vec<usize> = (0..500).collect();
            let rows: BTreeMap<String, ClassRows> = schema
                .classes
                .iter()
                .map(|k| (k.clone(), ClassRows { train: all.clone(), test: vec![] }))
                .collect();
            let config = BundleConfig {
                grids: vec![grid(Architecture::LogisticRegression, &[("c", vec![Float(1.0)])])],
                n_folds: 5,
                ..BundleConfig::with_default_grids(0)
            };
            let b = train_per_drug_bundle(c.x.view(), c.gold.view(), &schema, Backend::Static, &rows, &config).unwrap();
            (b, c.x)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_bit_depends_only_on_its_class_model(class in 0usize..10, donor in 0usize..10) {
            let (bundle, x) = fitted();
            let (labels, scores) = combine_bundle_predict(bundle, x.view()).unwrap();
            let mut mutated = bundle.clone();
            let name = &bundle.schema.classes[class];
            let donor_model = bundle.per_class[&bundle.schema.classes[donor]].model.clone();
            let sel = bundle.per_class[name].selection.clone();
            mutated.per_class.insert(name.clone(), ClassModel { selection: sel, model: donor_model });
            let (labels2, scores2) = combine_bundle_predict(&mutated, x.view()).unwrap();
            for j in (0..10).filter(|&j| j != class) {
                prop_assert_eq!(scores.column(j), scores2.column(j));
                for (a, b) in labels.iter().zip(&labels2) {
                    prop_assert_eq!(a.get(j), b.get(j));
                }
            }
        }
    }
}

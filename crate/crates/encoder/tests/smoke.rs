use std::sync::OnceLock;
use std::time::Instant;

use codtox_core::schema::LabelSchema;
use codtox_core::synth::{generate_cases, vocabulary, SynthConfig};
use codtox_core::text::StopList;
use codtox_core::LabeledCase;
use codtox_encoder::{
    attribute_tokens, finetune_encoder, predict_probabilities, threshold_labels, EncoderClassifier, FineTuneConfig,
    FineTuneOutcome, PretrainedEncoder,
};
use proptest::prelude::*;

/// A randomly initialized tiny encoder needs a larger step size and more
/// updates per epoch than the defaults, which are meant for pretrained weights.
const SMOKE_LR: f64 = 6e-4;
const SMOKE_BATCH: usize = 1;

fn cases() -> &'static Vec<LabeledCase> {
    static CASES: OnceLock<Vec<LabeledCase>> = OnceLock::new();
    CASES.get_or_init(|| {
        generate_cases(&SynthConfig { n_cases: 500, seed: 11, ..Default::default() }, &StopList::default()).unwrap()
    })
}

fn trained() -> &'static (FineTuneOutcome, f64) {
    static MODEL: OnceLock<(FineTuneOutcome, f64)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cases = cases();
        let (train, val) = cases.split_at(400);
        let texts: Vec<&str> = train.iter().map(|c| c.normalized_text.as_str()).collect();
        let encoder = PretrainedEncoder::tiny_random(&texts, 1).unwrap();
        let config = FineTuneConfig {
            encoder_id: "tiny-random:1".into(),
            learning_rate: SMOKE_LR,
            batch_size: SMOKE_BATCH,
            epochs: 5,
            seed: 1,
            ..Default::default()
        };
        let t0 = Instant::now();
        let out = finetune_encoder(&encoder, train, val, &LabelSchema::default(), &config).unwrap();
        (out, t0.elapsed().as_secs_f64())
    })
}

fn model() -> &'static EncoderClassifier {
    &trained().0.model
}

#[test]
fn tiny_encoder_learns_synthetic_keywords() {
    let (out, secs) = trained();
    for e in &out.log {
        eprintln!(
            "epoch {} loss {:.4} val macro F1 {:.4} subset acc {:.4}",
            e.epoch, e.train_loss, e.validation_macro_f1, e.validation_subset_accuracy
        );
    }
    assert!(out.log.len() <= 5);
    assert!(out.best().validation_subset_accuracy >= 0.9, "{:?}", out.best());
    assert!(*secs < 600.0);
    assert_eq!(out.model.num_labels(), 10);
}

#[test]
fn best_checkpoint_dominates_log() {
    let out = &trained().0;
    let best = out.best().validation_macro_f1;
    assert!(out.log.iter().all(|e| best >= e.validation_macro_f1));
    // the returned weights reproduce the logged validation score
    let val: Vec<&str> = cases()[400..].iter().map(|c| c.normalized_text.as_str()).collect();
    let probs = predict_probabilities(&out.model, &val, 7).unwrap();
    let pred = threshold_labels(probs.view(), 0.5).unwrap();
    let gold: Vec<_> = cases()[400..].iter().map(|c| c.gold.clone()).collect();
    let p = codtox_core::schema::label_matrix(&pred, 10).unwrap();
    let g = codtox_core::schema::label_matrix(&gold, 10).unwrap();
    let f1 = codtox_core::metrics::macro_f1(p.view(), g.view(), codtox_core::metrics::F1Mode::OverLabels).unwrap();
    assert!((f1 - best).abs() < 1e-9);
}

#[test]
fn loss_decreases_over_first_epochs() {
    let log = &trained().0.log;
    let increases = log[..3].windows(2).filter(|w| w[1].train_loss > w[0].train_loss).count();
    assert!(increases <= 1, "{log:?}");
    assert!(log[2].train_loss < log[0].train_loss);
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    m.save(dir.path()).unwrap();
    let back = EncoderClassifier::load(dir.path()).unwrap();
    let texts: Vec<&str> = cases()[..50].iter().map(|c| c.normalized_text.as_str()).collect();
    let a = predict_probabilities(m, &texts, 16).unwrap();
    let b = predict_probabilities(&back, &texts, 16).unwrap();
    assert_eq!(a, b);
    assert_eq!(predict_probabilities(m, &[], 4).unwrap().dim(), (0, 10));
}

fn random_text(words: &[String], picks: &[usize]) -> String {
    picks.iter().map(|&i| words[i % words.len()].as_str()).collect::<Vec<_>>().join(" ")
}

#[test]
fn probabilities_in_unit_interval_on_random_texts() {
    let words = vocabulary();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    });
    runner
        .run(&prop::collection::vec(0usize..10_000, 0..12), |picks| {
            let text = random_text(&words, &picks);
            let p = predict_probabilities(model(), &[&text], 1).unwrap();
            prop_assert_eq!(p.dim(), (1, 10));
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            Ok(())
        })
        .unwrap();
}

#[test]
fn integrated_gradients_completeness_on_sampled_cases() {
    let m = model();
    let schema = LabelSchema::default();
    for (i, case) in cases().iter().step_by(25).take(20).enumerate() {
        let class = &schema.classes[i % schema.len()];
        let map = attribute_tokens(m, &case.normalized_text, class, 50).unwrap();
        assert_eq!(map.tokens.len(), map.scores.len());

        // model outputs evaluated directly, outside the attribution code
        let j = schema.index_of(class).unwrap();
        let p = predict_probabilities(m, &[&case.normalized_text], 1).unwrap()[[0, j]];
        let fx = (p / (1.0 - p)).ln();
        assert!((fx - map.logit).abs() < 1e-3 * (1.0 + fx.abs()));
        let tok = &m.tokenizer;
        let n = tok.encode(&case.normalized_text, m.max_length).ids.len();
        let mut base = vec![tok.pad_id(); n];
        base[0] = tok.cls_id();
        base[n - 1] = tok.sep_id();
        let fb = f64::from(m.bert.logits_from_embeddings(m.bert.embedding_rows(&base))[[0, j]]);
        let delta = fx - fb;
        let tol = 0.05 * delta.abs() + 1e-3;
        assert!((map.total() - delta).abs() <= tol, "case {i}: sum {} vs {delta}", map.total());

        let fine = attribute_tokens(m, &case.normalized_text, class, 100).unwrap();
        assert!((fine.total() - map.total()).abs() <= tol);
    }
}

#[test]
fn attribution_argument_errors() {
    let m = model();
    assert!(attribute_tokens(m, "heroin", "caffeine", 50).is_err());
    assert!(attribute_tokens(m, "heroin", "heroin", 7).is_err());
    let empty = attribute_tokens(m, "", "heroin", 8).unwrap();
    assert!(empty.tokens.is_empty());
    assert!(empty.completeness_gap().abs() < 1e-6);
}

#[test]
fn empty_train_split_is_rejected() {
    let enc = PretrainedEncoder::tiny_random(&["a"], 0).unwrap();
    let err = finetune_encoder(&enc, &[], &cases()[..5], &LabelSchema::default(), &FineTuneConfig::default());
    assert!(err.is_err());
}

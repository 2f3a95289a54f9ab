//! Training, persistence and inference for each model family behind one
//! interface. A trained model lives in its own directory with a descriptor,
//! so it can be frozen and reused by another run.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use codtox_classic::{
    combine_bundle_predict, train_native_multilabel, train_per_drug_bundle, BinaryClassifierBundle, ClassRows,
    MultiLabelModel,
};
use codtox_core::embed::{CuiEmbedder, CuiLexicon, DocumentEmbedder, StaticEmbedder, VectorTable};
use codtox_core::schema::label_matrix;
use codtox_core::split::{split_keys, SplitIndices, SplitStrategy};
use codtox_core::synth::{synthetic_concepts, synthetic_word_vectors};
use codtox_core::{LabelSchema, LabelVector, LabeledCase};
use codtox_encoder::{
    finetune_encoder, predict_probabilities_timed, repair_implications, threshold_labels, ContextualEmbedder,
    EncoderClassifier, EpochLog, ModelRepository, PretrainedEncoder,
};
use codtox_llm::{
    build_prompt, parse_answer, query_text, render_answer, run_sft, sft_examples, ExemplarPool, FnClient,
    GenerationClient, GenerationRequest, HttpClient, HttpConfig, LlmError, PromptSpec, SftOutcome,
};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{bundle_config, ClientConfig, EmbeddingConfig, FamilyConfig, ModelConfig};
use crate::error::{AppError, Result};

pub const DESCRIPTOR_FILE: &str = "descriptor.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";
const EMBEDDER_DIR: &str = "embedder";
const BUNDLE_DIR: &str = "bundle";
const MULTI_FILE: &str = "multilabel.json";
const ENCODER_DIR: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub family: String,
    /// The config the model was trained with, paths resolved.
    pub config: ModelConfig,
    pub schema_sha256: String,
    pub seed: u64,
    /// Keys of every case whose labels the model saw, exemplar pools included.
    pub training_keys: Vec<String>,
    #[serde(default)]
    pub llm_model_id: Option<String>,
    #[serde(default)]
    pub sft: Option<SftOutcome>,
}

impl ModelDescriptor {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(DESCRIPTOR_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| AppError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| AppError::Data(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(DESCRIPTOR_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| AppError::io(&p, e))
    }
}

pub enum Trained {
    ClassicSingle { bundle: BinaryClassifierBundle, embedder: Box<dyn DocumentEmbedder> },
    ClassicMulti { model: MultiLabelModel, embedder: Box<dyn DocumentEmbedder> },
    Encoder { model: EncoderClassifier, batch_size: usize },
    Llm { model_id: String },
}

/// Labels and, where the family produces them, per-class probabilities.
pub struct Prediction {
    pub labels: Vec<LabelVector>,
    pub scores: Option<Array2<f64>>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub n_cases: usize,
    pub seconds: f64,
    pub cases_per_second: f64,
    #[serde(default)]
    pub n_batches: Option<usize>,
    #[serde(default)]
    pub truncated: Option<usize>,
}

impl Timing {
    fn new(n_cases: usize, seconds: f64) -> Self {
        let cases_per_second = if seconds > 0.0 { n_cases as f64 / seconds } else { 0.0 };
        Timing { n_cases, seconds, cases_per_second, n_batches: None, truncated: None }
    }
}

fn texts(cases: &[LabeledCase]) -> Vec<&str> {
    cases.iter().map(|c| c.normalized_text.as_str()).collect()
}

fn build_embedder(cfg: &EmbeddingConfig, model_dir: &Path, corpus: Option<&[&str]>) -> Result<Box<dyn DocumentEmbedder>> {
    Ok(match cfg {
        EmbeddingConfig::Static { vectors } => Box::new(StaticEmbedder { table: VectorTable::load(vectors)? }),
        EmbeddingConfig::SyntheticStatic { dim, seed } => {
            Box::new(StaticEmbedder { table: synthetic_word_vectors(*dim, *seed) })
        }
        EmbeddingConfig::Cui { lexicon, vectors, semantic_filter, filter_stage } => Box::new(CuiEmbedder {
            lexicon: CuiLexicon::load(lexicon)?,
            table: VectorTable::load(vectors)?,
            semantic_filter: semantic_filter.clone(),
            filter_stage: *filter_stage,
        }),
        EmbeddingConfig::SyntheticCui { dim, seed } => {
            let (lexicon, table) = synthetic_concepts(*dim, *seed);
            Box::new(CuiEmbedder {
                lexicon,
                table,
                semantic_filter: Some(codtox_core::embed::DEFAULT_SEMANTIC_FILTER.to_string()),
                filter_stage: Default::default(),
            })
        }
        EmbeddingConfig::Contextual { encoder_id, batch_size, repository } => {
            let saved = model_dir.join(EMBEDDER_DIR);
            // the encoder is saved with the model so a randomly initialized
            // one is reproduced exactly at inference time
            let enc = match corpus {
                Some(corpus) => {
                    let enc = ModelRepository { entries: repository.clone() }.load(encoder_id, corpus)?;
                    enc.save(&saved)?;
                    enc
                }
                None => PretrainedEncoder::load(&saved)?,
            };
            Box::new(ContextualEmbedder::new(&enc, *batch_size)?)
        }
    })
}

/// Per-class stratified 80/20 draw inside `pool` for the per-drug bundle.
/// A class too rare to stratify trains on the whole pool with no holdout.
pub fn class_rows(cases: &[LabeledCase], pool: &[usize], schema: &LabelSchema, seed: u64) -> BTreeMap<String, ClassRows> {
    let keys: Vec<String> = pool.iter().map(|&i| cases[i].key()).collect();
    let pos: HashMap<&str, usize> = keys.iter().enumerate().map(|(p, k)| (k.as_str(), pool[p])).collect();
    let mut out = BTreeMap::new();
    for (j, class) in schema.classes.iter().enumerate() {
        let target: Vec<u8> = pool.iter().map(|&i| cases[i].gold.bits()[j]).collect();
        let rows = match split_keys(&keys, Some(&target), SplitStrategy::Stratified8020, seed) {
            Ok(s) => ClassRows {
                train: s.train.iter().map(|k| pos[k.as_str()]).collect(),
                test: s.test.iter().map(|k| pos[k.as_str()]).collect(),
            },
            Err(_) => ClassRows { train: pool.to_vec(), test: Vec::new() },
        };
        out.insert(class.clone(), rows);
    }
    out
}

pub struct TrainInput<'a> {
    pub cases: &'a [LabeledCase],
    pub idx: &'a SplitIndices,
    pub schema: &'a LabelSchema,
    pub seed: u64,
}

fn select(cases: &[LabeledCase], idx: &[usize]) -> Vec<LabeledCase> {
    idx.iter().map(|&i| cases[i].clone()).collect()
}

fn keys_of(cases: &[LabeledCase], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| cases[i].key()).collect()
}

fn http_client(cfg: &HttpConfig, model_id: Option<&str>) -> Result<HttpClient> {
    let mut cfg = cfg.clone();
    if let Some(m) = model_id {
        cfg.model = m.to_string();
    }
    Ok(HttpClient::new(cfg)?)
}

/// Trains `model` and writes it with its descriptor into `dir`.
pub fn train(model: &ModelConfig, input: &TrainInput, dir: &Path) -> Result<Trained> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let TrainInput { cases, idx, schema, seed } = *input;
    let gold_rows: Vec<LabelVector> = cases.iter().map(|c| c.gold.clone()).collect();
    let gold = label_matrix(&gold_rows, schema.len())?;
    let mut pool: Vec<usize> = idx.train.iter().chain(&idx.validation).copied().collect();
    pool.sort_unstable();
    let mut descriptor = ModelDescriptor {
        name: model.name.clone(),
        family: model.family.kind().to_string(),
        config: model.clone(),
        schema_sha256: schema.hash(),
        seed,
        training_keys: keys_of(cases, &pool),
        llm_model_id: None,
        sft: None,
    };
    let trained = match &model.family {
        FamilyConfig::ClassicSingle { embedding, grids, n_folds, skip_classes } => {
            let train_texts: Vec<&str> = pool.iter().map(|&i| cases[i].normalized_text.as_str()).collect();
            let embedder = build_embedder(embedding, dir, Some(&train_texts))?;
            let x = embedder.embed_matrix(&texts(cases))?;
            let rows = class_rows(cases, &pool, schema, seed);
            let cfg = bundle_config(grids, *n_folds, skip_classes, seed);
            let bundle = train_per_drug_bundle(x.view(), gold.view(), schema, embedder.backend(), &rows, &cfg)?;
            if !bundle.failures.is_empty() {
                tracing::warn!(model = %model.name, failures = ?bundle.failures, "some classes have no model");
            }
            bundle.save(&dir.join(BUNDLE_DIR))?;
            Trained::ClassicSingle { bundle, embedder }
        }
        FamilyConfig::ClassicMulti { embedding, grid } => {
            let train_texts: Vec<&str> = pool.iter().map(|&i| cases[i].normalized_text.as_str()).collect();
            let embedder = build_embedder(embedding, dir, Some(&train_texts))?;
            let x = embedder.embed_matrix(&texts(cases))?;
            let m = train_native_multilabel(x.view(), gold.view(), idx, schema, embedder.backend(), grid, seed)?;
            m.save(&dir.join(MULTI_FILE))?;
            Trained::ClassicMulti { model: m, embedder }
        }
        FamilyConfig::Encoder { finetune, inference_batch_size, repository } => {
            let train = select(cases, &idx.train);
            let val = select(cases, &idx.validation);
            let encoder = ModelRepository { entries: repository.clone() }.load(&finetune.encoder_id, &texts(&train))?;
            let outcome = finetune_encoder(&encoder, &train, &val, schema, finetune)?;
            outcome.model.save(&dir.join(ENCODER_DIR))?;
            write_log(dir, &outcome.log, outcome.best_epoch)?;
            Trained::Encoder { model: outcome.model, batch_size: *inference_batch_size }
        }
        FamilyConfig::Llm { client, sft, .. } => {
            let model_id = match (client, sft) {
                (ClientConfig::Http(h), Some(sft_cfg)) => {
                    let train = select(cases, &idx.train);
                    let examples = sft_examples(&train, schema, sft_cfg.seed)?;
                    let mut c = http_client(h, None)?;
                    let outcome = run_sft(&mut c, &examples, sft_cfg)?;
                    let id = outcome.model_handle.clone();
                    descriptor.sft = Some(outcome);
                    id
                }
                (ClientConfig::Http(h), None) => h.model.clone(),
                (ClientConfig::GoldEcho, _) => "gold_echo".to_string(),
            };
            descriptor.llm_model_id = Some(model_id.clone());
            Trained::Llm { model_id }
        }
    };
    descriptor.save(dir)?;
    Ok(trained)
}

fn write_log(dir: &Path, log: &[EpochLog], best_epoch: usize) -> Result<()> {
    let p = dir.join(TRAINING_LOG_FILE);
    let v = serde_json::json!({ "best_epoch": best_epoch, "epochs": log });
    std::fs::write(&p, serde_json::to_string_pretty(&v)?).map_err(|e| AppError::io(&p, e))
}

/// Loads a model directory written by [`train`].
pub fn load(dir: &Path) -> Result<(Trained, ModelDescriptor)> {
    let d = ModelDescriptor::load(dir)?;
    let trained = match &d.config.family {
        FamilyConfig::ClassicSingle { embedding, .. } => Trained::ClassicSingle {
            bundle: BinaryClassifierBundle::load(&dir.join(BUNDLE_DIR))?,
            embedder: build_embedder(embedding, dir, None)?,
        },
        FamilyConfig::ClassicMulti { embedding, .. } => Trained::ClassicMulti {
            model: MultiLabelModel::load(&dir.join(MULTI_FILE))?,
            embedder: build_embedder(embedding, dir, None)?,
        },
        FamilyConfig::Encoder { inference_batch_size, .. } => Trained::Encoder {
            model: EncoderClassifier::load(&dir.join(ENCODER_DIR))?,
            batch_size: *inference_batch_size,
        },
        FamilyConfig::Llm { .. } => Trained::Llm {
            model_id: d.llm_model_id.clone().ok_or_else(|| AppError::Data("llm descriptor lacks a model id".into()))?,
        },
    };
    Ok((trained, d))
}

/// Label and score a batch of normalized texts. LLM models go through
/// [`llm_client`] and [`predict_llm`] instead.
pub fn predict(trained: &Trained, texts: &[&str]) -> Result<Prediction> {
    let started = Instant::now();
    let (labels, scores, mut timing) = match trained {
        Trained::ClassicSingle { bundle, embedder } => {
            let x = embedder.embed_matrix(texts)?;
            let (l, s) = combine_bundle_predict(bundle, x.view())?;
            (l, Some(s), None)
        }
        Trained::ClassicMulti { model, embedder } => {
            let x = embedder.embed_matrix(texts)?;
            let (l, s) = model.predict(x.view());
            (l, Some(s), None)
        }
        Trained::Encoder { model, batch_size } => {
            let (probs, t) = predict_probabilities_timed(model, texts, *batch_size)?;
            let mut labels = threshold_labels(probs.view(), model.config.threshold)?;
            if model.config.repair_implications {
                repair_implications(&mut labels, &model.schema);
            }
            let timing = Timing {
                n_batches: Some(t.n_batches),
                truncated: Some(t.truncated),
                ..Timing::new(t.n_texts, t.total_seconds)
            };
            (labels, Some(probs), Some(timing))
        }
        Trained::Llm { .. } => return Err(AppError::Usage("llm models predict through a generation client".into())),
    };
    if timing.is_none() {
        timing = Some(Timing::new(texts.len(), started.elapsed().as_secs_f64()));
    }
    Ok(Prediction { labels, scores, timing: timing.unwrap_or_default() })
}

/// Generation client for an llm model. `gold_echo` answers with the gold
/// labels of `cases` looked up by the prompt's query text.
pub fn llm_client(
    client: &ClientConfig,
    model_id: &str,
    cases: &[LabeledCase],
    schema: &LabelSchema,
) -> Result<Box<dyn GenerationClient>> {
    match client {
        ClientConfig::Http(h) => Ok(Box::new(http_client(h, Some(model_id))?)),
        ClientConfig::GoldEcho => {
            let answers: HashMap<String, String> = cases
                .iter()
                .map(|c| (c.normalized_text.split_whitespace().collect::<Vec<_>>().join(" "), render_answer(&c.gold, schema)))
                .collect();
            Ok(Box::new(FnClient::new("gold_echo", move |r: &GenerationRequest| {
                let q = query_text(&r.prompt).ok_or_else(|| LlmError::Transport("prompt has no case block".into()))?;
                answers.get(q).cloned().ok_or_else(|| LlmError::Transport("no gold answer for the queried text".into()))
            })))
        }
    }
}

/// Prompts for unlabeled rows, one request each with retries.
pub fn predict_llm(
    client: &dyn GenerationClient,
    rows: &[(String, String)],
    spec: &PromptSpec,
    pool: &ExemplarPool,
    schema: &LabelSchema,
    max_retries: usize,
) -> Result<Prediction> {
    pool.check_disjoint(rows.iter().map(|(k, _)| k.as_str()))?;
    let started = Instant::now();
    let mut labels = Vec::with_capacity(rows.len());
    for (key, text) in rows {
        let prompt = build_prompt(Some(key), text, spec, pool, schema)?;
        let req = GenerationRequest { prompt, max_tokens: spec.max_tokens, temperature: spec.temperature };
        let mut raw = String::new();
        for attempt in 0..=max_retries {
            match client.generate(&req) {
                Ok(r) => {
                    raw = r;
                    break;
                }
                Err(e) => tracing::warn!(case = %key, attempt, error = %e, "generation failed"),
            }
        }
        labels.push(parse_answer(&raw, schema).labels);
    }
    Ok(Prediction { labels, scores: None, timing: Timing::new(rows.len(), started.elapsed().as_secs_f64()) })
}

/// Highest-scoring class per row, for attribution targets.
pub fn top_class(scores: &Array2<f64>, schema: &LabelSchema) -> Vec<String> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            schema.classes[best].clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use codtox_core::split::make_splits;
    use codtox_core::synth::{generate_cases, SynthConfig};
    use codtox_core::text::StopList;

    fn corpus() -> (Vec<LabeledCase>, SplitIndices) {
        let cases = generate_cases(&SynthConfig { n_cases: 200, seed: 5, ..Default::default() }, &StopList::default()).unwrap();
        let split = make_splits(&cases, &LabelSchema::default(), SplitStrategy::Random602020, 1, None).unwrap();
        let idx = split.indices(&cases).unwrap();
        (cases, idx)
    }

    #[test]
    fn class_rows_stay_inside_the_pool() {
        let (cases, idx) = corpus();
        let schema = LabelSchema::default();
        let pool: Vec<usize> = idx.train.iter().chain(&idx.validation).copied().collect();
        let rows = class_rows(&cases, &pool, &schema, 3);
        assert_eq!(rows.len(), schema.len());
        for r in rows.values() {
            assert_eq!(r.train.len() + r.test.len(), pool.len());
            assert!(r.train.iter().chain(&r.test).all(|i| pool.contains(i)));
            assert!(r.train.iter().chain(&r.test).all(|i| !idx.test.contains(i)));
        }
    }

    #[test]
    fn classic_multi_round_trips_through_its_directory() {
        let (cases, idx) = corpus();
        let schema = LabelSchema::default();
        let cfg: ModelConfig = serde_json::from_value(serde_json::json!({
            "name": "rf", "family": "classic_multi",
            "embedding": {"backend": "synthetic_static", "dim": 16, "seed": 2},
            "grid": {"architecture": "random_forest", "grid": {"n_estimators": [10], "max_depth": [6]}}
        }))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let input = TrainInput { cases: &cases, idx: &idx, schema: &schema, seed: 7 };
        let trained = train(&cfg, &input, dir.path()).unwrap();
        let test: Vec<&str> = idx.test.iter().map(|&i| cases[i].normalized_text.as_str()).collect();
        let a = predict(&trained, &test).unwrap();
        let (loaded, d) = load(dir.path()).unwrap();
        let b = predict(&loaded, &test).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.scores, b.scores);
        assert_eq!(d.family, "classic_multi");
        assert_eq!(d.training_keys.len(), idx.train.len() + idx.validation.len());
        assert_eq!(a.timing.n_cases, test.len());
    }

    #[test]
    fn top_class_picks_the_argmax() {
        let schema = LabelSchema::default();
        let mut s = Array2::zeros((2, schema.len()));
        s[[0, 3]] = 0.9;
        s[[1, 0]] = 0.2;
        assert_eq!(top_class(&s, &schema), vec![schema.classes[3].clone(), schema.classes[0].clone()]);
    }
}

//! Pretrained encoder artifacts, the model repository, and the fine-tuned
//! classifier checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use codtox_core::LabelSchema;
use serde::{Deserialize, Serialize};

use crate::bert::{Bert, BertConfig};
use crate::error::{EncoderError, Result};
use crate::finetune::FineTuneConfig;
use crate::safetensors::{self, Tensor};
use crate::wordpiece::{build_vocab, WordPiece};

/// Identifier prefix for an encoder built from scratch on the training texts.
pub const TINY_RANDOM_PREFIX: &str = "tiny-random";

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Encoder weights plus tokenizer, before a task head is attached.
#[derive(Debug, Clone)]
pub struct PretrainedEncoder {
    pub source: String,
    pub config: BertConfig,
    pub tokenizer: WordPiece,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Deserialize)]
struct TokenizerConfig {
    #[serde(default = "yes")]
    do_lower_case: bool,
}

fn yes() -> bool {
    true
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| EncoderError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| EncoderError::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| EncoderError::io(path, e))
}

impl PretrainedEncoder {
    /// Reads `config.json`, `vocab.txt`, `model.safetensors` and the optional
    /// `tokenizer_config.json` from a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let missing = |f: &str| EncoderError::Config(format!("{}: no {f}", dir.display()));
        let config_path = dir.join("config.json");
        let vocab_path = dir.join("vocab.txt");
        let weights_path = dir.join("model.safetensors");
        for (p, f) in [(&config_path, "config.json"), (&vocab_path, "vocab.txt"), (&weights_path, "model.safetensors")] {
            if !p.is_file() {
                return Err(missing(f));
            }
        }
        let config: BertConfig = read_json(&config_path)?;
        config.validate()?;
        let tok_cfg = dir.join("tokenizer_config.json");
        let lowercase = if tok_cfg.is_file() {
            read_json::<TokenizerConfig>(&tok_cfg)?.do_lower_case
        } else {
            true
        };
        let tokenizer = WordPiece::load(&vocab_path, lowercase)?;
        if tokenizer.len() > config.vocab_size {
            return Err(EncoderError::Config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        let tensors = safetensors::read(&weights_path)?;
        Ok(PretrainedEncoder {
            source: dir.display().to_string(),
            config,
            tokenizer,
            tensors,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| EncoderError::io(dir, e))?;
        write_json(&dir.join("config.json"), &self.config)?;
        self.tokenizer.save(&dir.join("vocab.txt"))?;
        safetensors::write(&dir.join("model.safetensors"), &self.tensors)
    }

    /// A randomly initialized tiny encoder whose vocabulary is built from
    /// `texts`. Stands in for a pretrained checkpoint in offline runs.
    pub fn tiny_random<S: AsRef<str>>(texts: &[S], seed: u64) -> Result<Self> {
        let tokenizer = WordPiece::new(build_vocab(texts, 2), true)?;
        let config = BertConfig::tiny(tokenizer.len());
        let bert = Bert::random(config.clone(), 1, seed)?;
        let mut tensors = BTreeMap::new();
        for (name, m) in bert.params.iter().filter(|(n, _)| !n.starts_with("classifier")) {
            tensors.insert(
                name.to_string(),
                Tensor { shape: vec![m.nrows(), m.ncols()], data: m.iter().copied().collect() },
            );
        }
        Ok(PretrainedEncoder {
            source: format!("{TINY_RANDOM_PREFIX}:{seed}"),
            config,
            tokenizer,
            tensors,
        })
    }

    /// Longest token sequence the encoder accepts, `[CLS]` and `[SEP]` included.
    pub fn max_length(&self) -> usize {
        self.config.max_position_embeddings
    }

    /// Encoder with a fresh head of width `num_labels`.
    pub fn instantiate(&self, num_labels: usize, seed: u64) -> Result<Bert> {
        Bert::from_tensors(self.config.clone(), num_labels, &self.tensors, seed, Path::new(&self.source))
    }
}

/// Maps opaque encoder identifiers to checkpoint directories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRepository {
    pub entries: BTreeMap<String, PathBuf>,
}

impl ModelRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, dir: impl Into<PathBuf>) {
        self.entries.insert(id.to_string(), dir.into());
    }

    /// Registered identifier, else an existing directory path.
    pub fn resolve(&self, id: &str) -> Result<PathBuf> {
        if let Some(p) = self.entries.get(id) {
            return Ok(p.clone());
        }
        let p = PathBuf::from(id);
        if p.is_dir() {
            return Ok(p);
        }
        Err(EncoderError::Config(format!("unknown encoder id {id:?}")))
    }

    /// Loads `id`. `tiny-random` or `tiny-random:<seed>` builds a fresh tiny
    /// encoder from `corpus` instead.
    pub fn load<S: AsRef<str>>(&self, id: &str, corpus: &[S]) -> Result<PretrainedEncoder> {
        if let Some(rest) = id.strip_prefix(TINY_RANDOM_PREFIX) {
            let seed = match rest.strip_prefix(':') {
                Some(s) => s
                    .parse()
                    .map_err(|_| EncoderError::Config(format!("bad seed in encoder id {id:?}")))?,
                None if rest.is_empty() => 0,
                None => return Err(EncoderError::Config(format!("unknown encoder id {id:?}"))),
            };
            return PretrainedEncoder::tiny_random(corpus, seed);
        }
        PretrainedEncoder::load(&self.resolve(id)?)
    }
}

/// Fine-tuned encoder with a sigmoid head over the schema's classes.
#[derive(Clone)]
pub struct EncoderClassifier {
    pub bert: Bert,
    pub tokenizer: WordPiece,
    pub schema: LabelSchema,
    pub schema_hash: String,
    pub config: FineTuneConfig,
    pub max_length: usize,
    pub encoder_source: String,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    format: u32,
    schema: LabelSchema,
    schema_hash: String,
    finetune: FineTuneConfig,
    max_length: usize,
    encoder_source: String,
    lowercase: bool,
}

impl EncoderClassifier {
    pub fn new(bert: Bert, tokenizer: WordPiece, schema: LabelSchema, config: FineTuneConfig, max_length: usize, encoder_source: String) -> Result<Self> {
        let model = EncoderClassifier {
            schema_hash: schema.hash(),
            bert,
            tokenizer,
            schema,
            config,
            max_length,
            encoder_source,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.bert.num_labels != self.schema.len() {
            return Err(EncoderError::Shape(format!(
                "head width {} does not match schema size {}",
                self.bert.num_labels,
                self.schema.len()
            )));
        }
        if !self.bert.params.all_finite() {
            return Err(EncoderError::Training("non-finite weights".into()));
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.bert.num_labels
    }

    /// Writes a self-describing checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| EncoderError::io(dir, e))?;
        write_json(&dir.join("config.json"), &self.bert.config)?;
        self.tokenizer.save(&dir.join("vocab.txt"))?;
        self.bert.save_weights(&dir.join("model.safetensors"))?;
        write_json(
            &dir.join("classifier.json"),
            &ClassifierMeta {
                format: CHECKPOINT_FORMAT,
                schema: self.schema.clone(),
                schema_hash: self.schema_hash.clone(),
                finetune: self.config.clone(),
                max_length: self.max_length,
                encoder_source: self.encoder_source.clone(),
                lowercase: self.tokenizer.lowercase,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("classifier.json");
        if !meta_path.is_file() {
            return Err(EncoderError::Config(format!("{}: not a classifier checkpoint", dir.display())));
        }
        let meta: ClassifierMeta = read_json(&meta_path)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(EncoderError::format(&meta_path, format!("unsupported format {}", meta.format)));
        }
        meta.schema.validate()?;
        if meta.schema.hash() != meta.schema_hash {
            return Err(EncoderError::format(&meta_path, "schema hash does not match stored schema"));
        }
        let config: BertConfig = read_json(&dir.join("config.json"))?;
        let tokenizer = WordPiece::load(&dir.join("vocab.txt"), meta.lowercase)?;
        let weights = dir.join("model.safetensors");
        let tensors = safetensors::read(&weights)?;
        if !tensors.contains_key("classifier.weight") {
            return Err(EncoderError::format(&weights, "no classification head"));
        }
        let bert = Bert::from_tensors(config, meta.schema.len(), &tensors, 0, &weights)?;
        let model = EncoderClassifier {
            bert,
            tokenizer,
            schema: meta.schema,
            schema_hash: meta.schema_hash,
            config: meta.finetune,
            max_length: meta.max_length,
            encoder_source: meta.encoder_source,
        };
        model.check()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repository_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let enc = PretrainedEncoder::tiny_random(&["fentanyl toxicity", "fentanyl toxicity"], 3).unwrap();
        enc.save(&dir.path().join("enc")).unwrap();

        let mut repo = ModelRepository::new();
        repo.register("clinical", dir.path().join("enc"));
        let loaded = repo.load::<&str>("clinical", &[]).unwrap();
        assert_eq!(loaded.config, enc.config);
        assert_eq!(loaded.tensors, enc.tensors);
        assert_eq!(loaded.tokenizer, enc.tokenizer);

        let by_path = repo.load::<&str>(dir.path().join("enc").to_str().unwrap(), &[]).unwrap();
        assert_eq!(by_path.tensors.len(), enc.tensors.len());

        assert!(matches!(repo.load::<&str>("nowhere", &[]), Err(EncoderError::Config(_))));
        assert!(matches!(repo.load::<&str>("tiny-random:x", &[]), Err(EncoderError::Config(_))));
        assert!(matches!(repo.load::<&str>("tiny-randomly", &[]), Err(EncoderError::Config(_))));
        let a = repo.load("tiny-random:7", &["a b"]).unwrap();
        let b = repo.load("tiny-random:7", &["a b"]).unwrap();
        assert_eq!(a.tensors, b.tensors);
    }

    #[test]
    fn incomplete_directory_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = PretrainedEncoder::load(dir.path()).unwrap_err();
        assert!(matches!(err, EncoderError::Config(_)));
    }

    #[test]
    fn classifier_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = PretrainedEncoder::tiny_random(&["heroin", "heroin"], 1).unwrap();
        let schema = LabelSchema::default();
        let bert = enc.instantiate(schema.len(), 2).unwrap();
        let model =
            EncoderClassifier::new(bert, enc.tokenizer.clone(), schema, FineTuneConfig::default(), 64, enc.source.clone())
                .unwrap();
        assert_eq!(model.num_labels(), 10);
        model.save(dir.path()).unwrap();
        let back = EncoderClassifier::load(dir.path()).unwrap();
        assert_eq!(back.bert.params, model.bert.params);
        assert_eq!(back.schema_hash, model.schema_hash);
        assert_eq!(back.config, model.config);

        let wrong = enc.instantiate(3, 2).unwrap();
        let err = EncoderClassifier::new(wrong, enc.tokenizer, LabelSchema::default(), FineTuneConfig::default(), 64, String::new());
        assert!(matches!(err, Err(EncoderError::Shape(_))));
    }
}

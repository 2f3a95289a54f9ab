//! Declarative run configuration.
//!
//! Relative paths resolve against the config file's directory, or against
//! `CODTOX_DATA_ROOT` when set. `CODTOX_OUTPUT_DIR` replaces `output_dir` and
//! `CODTOX_LLM_ENDPOINT` replaces every HTTP client's `base_url`. Nothing
//! else is read from the environment.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use codtox_classic::grid::DEFAULT_GRID_VERSION;
use codtox_classic::{Architecture, BundleConfig, HyperGrid};
use codtox_core::embed::{FilterStage, DEFAULT_SEMANTIC_FILTER};
use codtox_core::record::{SchemaMap, TextFields};
use codtox_core::split::SplitStrategy;
use codtox_core::LabelSchema;
use codtox_encoder::FineTuneConfig;
use codtox_llm::{HttpConfig, PromptSpec, SftConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const ENV_DATA_ROOT: &str = "CODTOX_DATA_ROOT";
pub const ENV_OUTPUT_DIR: &str = "CODTOX_OUTPUT_DIR";
pub const ENV_LLM_ENDPOINT: &str = "CODTOX_LLM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    /// Evaluated with the models trained on `dataset`, never refit.
    #[serde(default)]
    pub external: Option<DatasetConfig>,
    #[serde(default)]
    pub schema: LabelSchema,
    #[serde(default)]
    pub text: TextConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Files {
        records: PathBuf,
        gold: PathBuf,
        #[serde(default)]
        schema_map: SchemaMap,
    },
    /// Keyword-triggered generated corpus.
    Synthetic {
        n_cases: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        id_prefix: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    #[serde(default)]
    pub fields: TextFields,
    /// Defaults to the built-in English list.
    #[serde(default)]
    pub stop_list: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_strategy")]
    pub strategy: SplitStrategy,
    #[serde(default)]
    pub target_class: Option<String>,
    /// Overrides the run seed for partitioning.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Reuse an existing split manifest instead of drawing one.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

fn default_strategy() -> SplitStrategy {
    SplitStrategy::Random602020
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { strategy: default_strategy(), target_class: None, seed: None, manifest: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings { n_resamples: 1000, level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// Directory of a previously trained model; skips training.
    #[serde(default)]
    pub frozen: Option<PathBuf>,
    #[serde(flatten)]
    pub family: FamilyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyConfig {
    ClassicSingle {
        embedding: EmbeddingConfig,
        /// Defaults to every architecture's default grid.
        #[serde(default)]
        grids: Option<Vec<HyperGrid>>,
        #[serde(default = "default_folds")]
        n_folds: usize,
        #[serde(default)]
        skip_classes: Vec<String>,
    },
    ClassicMulti {
        embedding: EmbeddingConfig,
        grid: HyperGrid,
    },
    Encoder {
        finetune: FineTuneConfig,
        #[serde(default = "default_inference_batch")]
        inference_batch_size: usize,
        /// Encoder id to checkpoint directory.
        #[serde(default)]
        repository: BTreeMap<String, PathBuf>,
    },
    Llm {
        client: ClientConfig,
        #[serde(default)]
        prompt: PromptSpec,
        #[serde(default = "default_concurrency")]
        concurrency: usize,
        #[serde(default = "default_retries")]
        max_retries: usize,
        #[serde(default)]
        sft: Option<SftConfig>,
    },
}

fn default_folds() -> usize {
    codtox_classic::cv::DEFAULT_FOLDS
}

fn default_inference_batch() -> usize {
    64
}

fn default_concurrency() -> usize {
    4
}

fn default_retries() -> usize {
    3
}

impl FamilyConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            FamilyConfig::ClassicSingle { .. } => "classic_single",
            FamilyConfig::ClassicMulti { .. } => "classic_multi",
            FamilyConfig::Encoder { .. } => "encoder",
            FamilyConfig::Llm { .. } => "llm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    /// Word-per-line vector file.
    Static { vectors: PathBuf },
    /// Generated vectors over the synthetic vocabulary.
    SyntheticStatic { dim: usize, seed: u64 },
    Cui {
        lexicon: PathBuf,
        vectors: PathBuf,
        #[serde(default = "default_semantic_filter")]
        semantic_filter: Option<String>,
        #[serde(default)]
        filter_stage: FilterStage,
    },
    SyntheticCui { dim: usize, seed: u64 },
    /// Mean-pooled final-layer states of an encoder.
    Contextual {
        encoder_id: String,
        #[serde(default = "default_inference_batch")]
        batch_size: usize,
        #[serde(default)]
        repository: BTreeMap<String, PathBuf>,
    },
}

fn default_semantic_filter() -> Option<String> {
    Some(DEFAULT_SEMANTIC_FILTER.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientConfig {
    Http(HttpConfig),
    /// Answers every prompt with the gold labels of the queried case.
    /// Exercises the pipeline without a model; evaluation only.
    GoldEcho,
}

/// A parsed config together with the bytes it was read from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
    /// True when flags or environment changed the parsed values.
    pub overridden: bool,
}

impl LoadedConfig {
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let raw = serde_json::to_vec_pretty(&config).map_err(|e| AppError::Usage(e.to_string()))?;
        config.validate()?;
        Ok(LoadedConfig { config, raw, overridden: false })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&raw)
            .map_err(|e| AppError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = match std::env::var_os(ENV_DATA_ROOT) {
            Some(root) => PathBuf::from(root),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        config.resolve_paths(&base);
        let mut overridden = false;
        if let Some(out) = std::env::var_os(ENV_OUTPUT_DIR) {
            config.output_dir = PathBuf::from(out);
            overridden = true;
        }
        if let Ok(url) = std::env::var(ENV_LLM_ENDPOINT) {
            for m in &mut config.models {
                if let FamilyConfig::Llm { client: ClientConfig::Http(h), .. } = &mut m.family {
                    h.base_url = url.clone();
                    overridden = true;
                }
            }
        }
        config.validate()?;
        Ok(LoadedConfig { config, raw, overridden })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.apply_seed(seed);
        self.overridden = true;
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        self.config.output_dir = dir;
        self.overridden = true;
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !base.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl DatasetConfig {
    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Files { records, gold, .. } = self {
            resolve(base, records);
            resolve(base, gold);
        }
    }
}

impl EmbeddingConfig {
    fn resolve_paths(&mut self, base: &Path) {
        match self {
            EmbeddingConfig::Static { vectors } => resolve(base, vectors),
            EmbeddingConfig::Cui { lexicon, vectors, .. } => {
                resolve(base, lexicon);
                resolve(base, vectors);
            }
            EmbeddingConfig::Contextual { repository, .. } => repository.values_mut().for_each(|p| resolve(base, p)),
            EmbeddingConfig::SyntheticStatic { .. } | EmbeddingConfig::SyntheticCui { .. } => {}
        }
    }
}

impl RunConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        self.dataset.resolve_paths(base);
        if let Some(e) = &mut self.external {
            e.resolve_paths(base);
        }
        if let Some(p) = &mut self.text.stop_list {
            resolve(base, p);
        }
        if let Some(p) = &mut self.split.manifest {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
        for m in &mut self.models {
            if let Some(p) = &mut m.frozen {
                resolve(base, p);
            }
            match &mut m.family {
                FamilyConfig::ClassicSingle { embedding, .. } | FamilyConfig::ClassicMulti { embedding, .. } => {
                    embedding.resolve_paths(base)
                }
                FamilyConfig::Encoder { repository, finetune, .. } => {
                    repository.values_mut().for_each(|p| resolve(base, p));
                    // a bare relative directory id
                    if !repository.contains_key(&finetune.encoder_id)
                        && !finetune.encoder_id.starts_with(codtox_encoder::model::TINY_RANDOM_PREFIX)
                        && base.join(&finetune.encoder_id).is_dir()
                    {
                        finetune.encoder_id = base.join(&finetune.encoder_id).to_string_lossy().into_owned();
                    }
                }
                FamilyConfig::Llm { .. } => {}
            }
        }
    }

    /// Sets the run seed and every nested seed to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.split.seed = None;
        for m in &mut self.models {
            match &mut m.family {
                FamilyConfig::Encoder { finetune, .. } => finetune.seed = seed,
                FamilyConfig::Llm { prompt, sft, .. } => {
                    prompt.exemplar_seed = seed;
                    if let Some(s) = sft {
                        s.seed = seed;
                    }
                }
                FamilyConfig::ClassicSingle { .. } | FamilyConfig::ClassicMulti { .. } => {}
            }
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AppError::Usage(m));
        if self.name.trim().is_empty() {
            return bad("config `name` is empty".into());
        }
        self.schema.validate().map_err(|e| AppError::Usage(e.to_string()))?;
        if self.models.is_empty() {
            return bad("config lists no models".into());
        }
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) || self.bootstrap.n_resamples == 0 {
            return bad("bootstrap needs n_resamples > 0 and level in (0, 1)".into());
        }
        let mut names = HashSet::new();
        for m in &self.models {
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("model name `{}` must be non-empty [A-Za-z0-9_-]", m.name));
            }
            if !names.insert(&m.name) {
                return bad(format!("duplicate model name `{}`", m.name));
            }
            match &m.family {
                FamilyConfig::ClassicSingle { grids, n_folds, skip_classes, .. } => {
                    if *n_folds < 2 {
                        return bad(format!("{}: n_folds must be at least 2", m.name));
                    }
                    for g in grids.iter().flatten() {
                        g.validate().map_err(AppError::from)?;
                    }
                    for c in skip_classes {
                        if self.schema.index_of(c).is_none() {
                            return bad(format!("{}: unknown class `{c}` in skip_classes", m.name));
                        }
                    }
                }
                FamilyConfig::ClassicMulti { grid, .. } => {
                    grid.validate().map_err(AppError::from)?;
                    if !grid.architecture.supports_multilabel() {
                        return bad(format!("{}: {} has no native multi-label form", m.name, grid.architecture));
                    }
                }
                FamilyConfig::Encoder { finetune, inference_batch_size, .. } => {
                    finetune.validate().map_err(AppError::from)?;
                    if *inference_batch_size == 0 {
                        return bad(format!("{}: inference_batch_size must be positive", m.name));
                    }
                }
                FamilyConfig::Llm { client, prompt, concurrency, sft, .. } => {
                    prompt.validate().map_err(AppError::from)?;
                    if *concurrency == 0 {
                        return bad(format!("{}: concurrency must be positive", m.name));
                    }
                    if let Some(s) = sft {
                        s.validate().map_err(AppError::from)?;
                        if matches!(client, ClientConfig::GoldEcho) {
                            return bad(format!("{}: SFT needs an http client", m.name));
                        }
                    }
                }
            }
        }
        if self.split.strategy == SplitStrategy::Stratified8020 {
            let needs_validation = self.models.iter().any(|m| {
                m.frozen.is_none()
                    && matches!(m.family, FamilyConfig::ClassicMulti { .. } | FamilyConfig::Encoder { .. } | FamilyConfig::Llm { .. })
            });
            if needs_validation {
                return bad("stratified_80_20 has no validation partition; classic_multi, encoder and llm need one".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with `output_dir` blanked, so a run can
    /// be resumed from a moved directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Default bundle search for a classic_single model.
pub fn bundle_config(grids: &Option<Vec<HyperGrid>>, n_folds: usize, skip: &[String], seed: u64) -> BundleConfig {
    BundleConfig {
        grids: grids
            .clone()
            .unwrap_or_else(|| Architecture::ALL.iter().map(|&a| HyperGrid::default_for(a)).collect()),
        n_folds,
        seed,
        skip_classes: skip.to_vec(),
        grid_version: DEFAULT_GRID_VERSION.to_string(),
    }
}

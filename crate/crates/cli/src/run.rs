//! Stage orchestration over a locked run directory.
//!
//! Stages: `ingest`, `ingest_external`, `split`, `train:<model>`,
//! `evaluate:<model>:<dataset>`, `report`. A stage that completed in an
//! earlier invocation and whose artifacts still verify is reused; its
//! outputs are read back from disk only when a later stage needs them.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Utc;
use codtox_core::error_analysis::build_error_table;
use codtox_core::metrics::{evaluate, BootstrapConfig, DatasetTag, EvalData, MetricReport};
use codtox_core::schema::label_matrix;
use codtox_core::split::{make_splits, DatasetSplit, SplitIndices, SplitStrategy};
use codtox_core::{LabelSchema, LabelVector, LabeledCase};
use codtox_encoder::{attribute_tokens, render_attribution_report, ReportFormat};
use codtox_llm::{evaluate_generations, EvalOptions, ExemplarPool};
use serde_json::json;

use crate::config::{DatasetConfig, FamilyConfig, LoadedConfig, ModelConfig, RunConfig};
use crate::data::{load_dataset, read_cases, read_prediction_input, write_cases};
use crate::error::{AppError, Result};
use crate::families::{self, ModelDescriptor, Prediction, Trained, TrainInput};
use crate::manifest::{list_files, RunManifest, RunStatus, StageRecord, StageStatus};
use crate::report::summary_table;
use crate::rundir::{confine, select_run_dir, EventLog, RunLock, CONFIG_FILE};

pub const CASES_FILE: &str = "data/cases.jsonl";
pub const EXTERNAL_CASES_FILE: &str = "data/external_cases.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const SUMMARY_FILE: &str = "reports/summary.tsv";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective.json";

/// Last stage group to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Until {
    Ingest,
    Split,
    Train,
    Evaluate,
    Report,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub until: Until,
    /// Restrict model stages to these names.
    pub models: Option<Vec<String>>,
    /// Start a new subrun even when a matching run exists.
    pub fresh: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { until: Until::Report, models: None, fresh: false }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn train_stage(model: &str) -> String {
    format!("train:{model}")
}

pub fn evaluate_stage(model: &str, tag: DatasetTag) -> String {
    format!("evaluate:{model}:{tag}")
}

pub fn model_dir(model: &str) -> String {
    format!("models/{model}")
}

fn artifact_name(model: &str, tag: DatasetTag, ext: &str) -> String {
    format!("{model}.{tag}.{ext}")
}

/// Fingerprint of a bare key set, computed as for a split's test partition.
pub fn key_fingerprint(keys: &[String]) -> String {
    DatasetSplit {
        strategy: SplitStrategy::Random602020,
        seed: 0,
        target_class: None,
        train: Vec::new(),
        validation: Vec::new(),
        test: keys.to_vec(),
    }
    .test_fingerprint()
}

/// Runs `config` through `options.until` and returns the final manifest.
pub fn run_experiment(config: &LoadedConfig, options: &RunOptions) -> Result<RunOutcome> {
    let mut runner = Runner::open(config, options.fresh)?;
    runner.run(options)?;
    Ok(runner.finish())
}

struct LoadedModel {
    trained: Trained,
    descriptor: ModelDescriptor,
}

/// An open, locked run directory.
pub struct Runner {
    config: RunConfig,
    dir: PathBuf,
    manifest: RunManifest,
    events: EventLog,
    _lock: RunLock,
    all_reused: bool,
    cases: Option<Vec<LabeledCase>>,
    external: Option<Vec<LabeledCase>>,
    split: Option<DatasetSplit>,
    models: BTreeMap<String, LoadedModel>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| AppError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

/// Case id, one 0/1 column per class, then `p_<class>` when scores exist.
pub fn write_prediction_csv(
    path: &Path,
    keys: &[String],
    labels: &[LabelVector],
    scores: Option<&ndarray::Array2<f64>>,
    schema: &LabelSchema,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    let csv_err = |e: csv::Error| AppError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["case_id".to_string()];
    header.extend(schema.classes.iter().cloned());
    if scores.is_some() {
        header.extend(schema.classes.iter().map(|c| format!("p_{c}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, (k, v)) in keys.iter().zip(labels).enumerate() {
        let mut row = vec![k.clone()];
        row.extend(v.bits().iter().map(|b| b.to_string()));
        if let Some(s) = scores {
            row.extend(s.row(i).iter().map(|p| p.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

impl Runner {
    pub fn open(loaded: &LoadedConfig, fresh: bool) -> Result<Self> {
        let config = loaded.config.clone();
        let hash = config.hash();
        let (dir, resumed) = select_run_dir(&config.output_dir, &hash, fresh)?;
        let lock = RunLock::acquire(&dir)?;
        let events = EventLog::open(&dir)?;
        let mut manifest = if resumed { RunManifest::load(&dir)? } else { RunManifest::new(&config.name, &hash) };
        if !resumed {
            let path = dir.join(CONFIG_FILE);
            std::fs::write(&path, &loaded.raw).map_err(|e| AppError::io(&path, e))?;
            let mut rels = vec![CONFIG_FILE.to_string()];
            if loaded.overridden {
                write_json(&dir.join(EFFECTIVE_CONFIG_FILE), &config)?;
                rels.push(EFFECTIVE_CONFIG_FILE.to_string());
            }
            manifest.record_artifacts(&dir, &rels)?;
        }
        manifest.invocations += 1;
        manifest.status = RunStatus::Running;
        manifest.save(&dir)?;
        events.emit(
            "run_started",
            json!({"run_dir": dir.display().to_string(), "resumed": resumed, "config_sha256": hash}),
        );
        Ok(Runner {
            config,
            dir,
            manifest,
            events,
            _lock: lock,
            all_reused: true,
            cases: None,
            external: None,
            split: None,
            models: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn upsert_stage(&mut self, rec: StageRecord) {
        match self.manifest.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.manifest.stages.push(rec),
        }
    }

    /// Runs `body` as stage `name` unless it can be reused.
    fn stage<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut Self) -> Result<Vec<String>>,
    {
        if self.manifest.stage_reusable(&self.dir, name) {
            let mut rec = self.manifest.stage(name).cloned().expect("reusable stage exists");
            rec.status = StageStatus::Reused;
            self.upsert_stage(rec);
            self.events.emit("stage_reused", json!({"stage": name}));
            return Ok(());
        }
        self.all_reused = false;
        let started_at = Utc::now();
        let t0 = Instant::now();
        self.events.emit("stage_started", json!({"stage": name}));
        tracing::info!(stage = name, "stage started");
        let result = body(self).and_then(|rels| {
            self.manifest.record_artifacts(&self.dir, &rels)?;
            Ok(rels)
        });
        let seconds = t0.elapsed().as_secs_f64();
        let (status, artifacts, error) = match &result {
            Ok(rels) => (StageStatus::Completed, rels.clone(), None),
            Err(e) => (StageStatus::Failed, Vec::new(), Some(e.to_string())),
        };
        self.upsert_stage(StageRecord {
            name: name.to_string(),
            status,
            started_at,
            finished_at: Utc::now(),
            seconds,
            artifacts,
            error: error.clone(),
        });
        match result {
            Ok(_) => {
                self.manifest.save(&self.dir)?;
                self.events.emit("stage_finished", json!({"stage": name, "seconds": seconds}));
                Ok(())
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.save(&self.dir)?;
                self.events.emit("stage_failed", json!({"stage": name, "seconds": seconds, "error": error}));
                tracing::error!(stage = name, error = %e, "stage failed");
                Err(e.in_stage(name))
            }
        }
    }

    fn selected_models(&self, options: &RunOptions) -> Result<Vec<ModelConfig>> {
        match &options.models {
            None => Ok(self.config.models.clone()),
            Some(names) => names
                .iter()
                .map(|n| {
                    self.config
                        .models
                        .iter()
                        .find(|m| &m.name == n)
                        .cloned()
                        .ok_or_else(|| AppError::Usage(format!("config has no model `{n}`")))
                })
                .collect(),
        }
    }

    pub fn run(&mut self, options: &RunOptions) -> Result<()> {
        let models = self.selected_models(options)?;
        self.stage("ingest", |r| r.ingest(false))?;
        if self.config.external.is_some() {
            self.stage("ingest_external", |r| r.ingest(true))?;
        }
        if options.until >= Until::Split {
            self.stage("split", Runner::make_split)?;
        }
        if options.until >= Until::Train {
            for m in models.iter().filter(|m| m.frozen.is_none()) {
                self.stage(&train_stage(&m.name), |r| r.train(m))?;
            }
        }
        if options.until >= Until::Evaluate {
            for m in &models {
                self.stage(&evaluate_stage(&m.name, DatasetTag::InternalTest), |r| r.evaluate(m, DatasetTag::InternalTest))?;
                if self.config.external.is_some() {
                    self.stage(&evaluate_stage(&m.name, DatasetTag::ExternalTest), |r| r.evaluate(m, DatasetTag::ExternalTest))?;
                }
            }
        }
        if options.until >= Until::Report {
            self.write_summary()?;
        }
        Ok(())
    }

    /// Expected stage names for the whole config.
    fn all_stage_names(&self) -> Vec<String> {
        let mut names = vec!["ingest".to_string(), "split".to_string()];
        if self.config.external.is_some() {
            names.push("ingest_external".into());
        }
        for m in &self.config.models {
            if m.frozen.is_none() {
                names.push(train_stage(&m.name));
            }
            names.push(evaluate_stage(&m.name, DatasetTag::InternalTest));
            if self.config.external.is_some() {
                names.push(evaluate_stage(&m.name, DatasetTag::ExternalTest));
            }
        }
        names.push("report".into());
        names
    }

    pub fn finish(mut self) -> RunOutcome {
        let done: HashSet<&str> = self
            .manifest
            .stages
            .iter()
            .filter(|s| matches!(s.status, StageStatus::Completed | StageStatus::Reused))
            .map(|s| s.name.as_str())
            .collect();
        let complete = self.all_stage_names().iter().all(|n| done.contains(n.as_str()));
        self.manifest.status = if complete { RunStatus::Complete } else { RunStatus::Partial };
        self.manifest.reused = self.all_reused;
        if let Err(e) = self.manifest.save(&self.dir) {
            tracing::error!(error = %e, "could not save manifest");
        }
        self.events.emit(
            "run_finished",
            json!({"status": self.manifest.status, "reused": self.manifest.reused}),
        );
        RunOutcome { dir: self.dir.clone(), manifest: self.manifest.clone() }
    }

    fn ingest(&mut self, external: bool) -> Result<Vec<String>> {
        let cfg = if external { self.config.external.clone().expect("external configured") } else { self.config.dataset.clone() };
        let (cases, summary) = load_dataset(&cfg, &self.config.schema, &self.config.text)?;
        if cases.is_empty() {
            return Err(AppError::Data("dataset has no usable cases".into()));
        }
        if !summary.lint.warnings.is_empty() {
            tracing::warn!(n = summary.lint.warnings.len(), "label implication violations");
        }
        let (cases_rel, summary_rel) = if external {
            (EXTERNAL_CASES_FILE, "data/external_ingest.json")
        } else {
            (CASES_FILE, "data/ingest.json")
        };
        std::fs::create_dir_all(self.dir.join("data")).map_err(|e| AppError::io(&self.dir, e))?;
        write_cases(&self.dir.join(cases_rel), &cases)?;
        write_json(&self.dir.join(summary_rel), &summary)?;
        self.events.emit(
            "ingested",
            json!({"external": external, "input_rows": summary.input_rows, "retained": summary.retained, "excluded": summary.excluded}),
        );
        if external {
            self.external = Some(cases);
        } else {
            self.cases = Some(cases);
        }
        Ok(vec![cases_rel.to_string(), summary_rel.to_string()])
    }

    fn cases(&mut self) -> Result<&[LabeledCase]> {
        if self.cases.is_none() {
            self.cases = Some(read_cases(&self.dir.join(CASES_FILE))?);
        }
        Ok(self.cases.as_deref().expect("loaded"))
    }

    fn external_cases(&mut self) -> Result<&[LabeledCase]> {
        if self.external.is_none() {
            self.external = Some(read_cases(&self.dir.join(EXTERNAL_CASES_FILE))?);
        }
        Ok(self.external.as_deref().expect("loaded"))
    }

    fn make_split(&mut self) -> Result<Vec<String>> {
        let schema = self.config.schema.clone();
        let split_cfg = self.config.split.clone();
        let seed = self.config.split_seed();
        let cases = self.cases()?;
        let split = match &split_cfg.manifest {
            Some(p) => {
                let s = DatasetSplit::load(p)?;
                s.verify(Some(cases))?;
                s
            }
            None => make_splits(cases, &schema, split_cfg.strategy, seed, split_cfg.target_class.as_deref())?,
        };
        split.save(&self.dir.join(SPLIT_FILE))?;
        self.events.emit(
            "split",
            json!({"train": split.train.len(), "validation": split.validation.len(), "test": split.test.len(), "fingerprint": split.test_fingerprint()}),
        );
        self.manifest.split_fingerprint = Some(split.test_fingerprint());
        self.split = Some(split);
        Ok(vec![SPLIT_FILE.to_string()])
    }

    fn split(&mut self) -> Result<&DatasetSplit> {
        if self.split.is_none() {
            let s = DatasetSplit::load(&self.dir.join(SPLIT_FILE))?;
            self.manifest.split_fingerprint = Some(s.test_fingerprint());
            self.split = Some(s);
        }
        Ok(self.split.as_ref().expect("loaded"))
    }

    fn indices(&mut self) -> Result<SplitIndices> {
        let split = self.split()?.clone();
        Ok(split.indices(self.cases()?)?)
    }

    fn train(&mut self, model: &ModelConfig) -> Result<Vec<String>> {
        let idx = self.indices()?;
        let rel = model_dir(&model.name);
        let dir = self.dir.join(&rel);
        if dir.exists() {
            // leftovers of a failed attempt; never recorded as complete
            std::fs::remove_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        }
        let schema = self.config.schema.clone();
        let seed = self.config.seed;
        let cases = self.cases()?;
        let input = TrainInput { cases, idx: &idx, schema: &schema, seed };
        let trained = families::train(model, &input, &dir)?;
        let descriptor = ModelDescriptor::load(&dir)?;
        self.models.insert(model.name.clone(), LoadedModel { trained, descriptor });
        list_files(&self.dir, &rel)
    }

    fn load_model(&mut self, model: &ModelConfig) -> Result<()> {
        if self.models.contains_key(&model.name) {
            return Ok(());
        }
        let dir = match &model.frozen {
            Some(p) => p.clone(),
            None => self.dir.join(model_dir(&model.name)),
        };
        let (trained, descriptor) = families::load(&dir)?;
        if descriptor.family != model.family.kind() {
            return Err(AppError::Usage(format!(
                "{}: frozen model at {} is {}, config says {}",
                model.name,
                dir.display(),
                descriptor.family,
                model.family.kind()
            )));
        }
        if descriptor.schema_sha256 != self.config.schema.hash() {
            return Err(AppError::Data(format!("{}: model was trained with a different label schema", model.name)));
        }
        self.models.insert(model.name.clone(), LoadedModel { trained, descriptor });
        Ok(())
    }

    /// Validation cases of this run; the few-shot exemplar pool.
    fn validation_cases(&mut self) -> Result<Vec<LabeledCase>> {
        let idx = self.indices()?;
        let cases = self.cases()?;
        Ok(idx.validation.iter().map(|&i| cases[i].clone()).collect())
    }

    fn eval_cases(&mut self, tag: DatasetTag) -> Result<(Vec<LabeledCase>, String)> {
        match tag {
            DatasetTag::ExternalTest => {
                let cases = self.external_cases()?.to_vec();
                let keys: Vec<String> = cases.iter().map(LabeledCase::key).collect();
                Ok((cases, key_fingerprint(&keys)))
            }
            _ => {
                let idx = self.indices()?;
                let fp = self.split()?.test_fingerprint();
                let cases = self.cases()?;
                Ok((idx.test.iter().map(|&i| cases[i].clone()).collect(), fp))
            }
        }
    }

    fn evaluate(&mut self, model: &ModelConfig, tag: DatasetTag) -> Result<Vec<String>> {
        self.load_model(model)?;
        let (cases, fingerprint) = self.eval_cases(tag)?;
        let schema = self.config.schema.clone();
        let pool_cases = match model.family {
            FamilyConfig::Llm { .. } => self.validation_cases()?,
            _ => Vec::new(),
        };
        let keys: Vec<String> = cases.iter().map(LabeledCase::key).collect();
        let loaded = &self.models[&model.name];
        // no experiment ever scores cases its model learned from
        let seen: HashSet<&str> = loaded.descriptor.training_keys.iter().map(String::as_str).collect();
        let leaked: Vec<&String> = keys.iter().filter(|k| seen.contains(k.as_str())).collect();
        if !leaked.is_empty() {
            return Err(AppError::stage(
                &evaluate_stage(&model.name, tag),
                format!("{} evaluation cases were in the training data, e.g. `{}`", leaked.len(), leaked[0]),
            ));
        }
        let bootstrap = BootstrapConfig {
            n_resamples: self.config.bootstrap.n_resamples,
            level: self.config.bootstrap.level,
            seed: self.config.seed,
        };
        let gold_rows: Vec<LabelVector> = cases.iter().map(|c| c.gold.clone()).collect();
        let gold = label_matrix(&gold_rows, schema.len())?;
        let mut rels = Vec::new();
        let (prediction, mut report): (Prediction, MetricReport) = match (&loaded.trained, &model.family) {
            (Trained::Llm { model_id }, FamilyConfig::Llm { client, prompt, concurrency, max_retries, .. }) => {
                let pool = ExemplarPool::from_cases(&pool_cases, &schema);
                let client = families::llm_client(client, model_id, &cases, &schema)?;
                let opts = EvalOptions {
                    concurrency: *concurrency,
                    max_retries: *max_retries,
                    dataset: tag,
                    bootstrap: bootstrap.clone(),
                    ..Default::default()
                };
                let run = evaluate_generations(client.as_ref(), &cases, prompt, &pool, &schema, &opts)?;
                let rel = format!("generations/{}", artifact_name(&model.name, tag, "jsonl"));
                std::fs::create_dir_all(self.dir.join("generations")).map_err(|e| AppError::io(&self.dir, e))?;
                run.write_jsonl(&self.dir.join(&rel))?;
                rels.push(rel);
                let mut report = run.report;
                report.notes.push(format!("generation model {}", report.model));
                report.model = model.name.clone();
                let timing = families::Timing {
                    n_cases: cases.len(),
                    seconds: run.seconds,
                    cases_per_second: if run.seconds > 0.0 { cases.len() as f64 / run.seconds } else { 0.0 },
                    n_batches: None,
                    truncated: None,
                };
                (Prediction { labels: run.predictions, scores: None, timing }, report)
            }
            (trained, _) => {
                let texts: Vec<&str> = cases.iter().map(|c| c.normalized_text.as_str()).collect();
                let p = families::predict(trained, &texts)?;
                let pred = label_matrix(&p.labels, schema.len())?;
                let data = EvalData::new(pred, gold.clone(), p.scores.clone())?;
                let report = evaluate(&model.name, tag, &schema, &data, &bootstrap)?;
                (p, report)
            }
        };
        report.split_fingerprint = Some(fingerprint);
        let report_rel = format!("reports/{}", artifact_name(&model.name, tag, "json"));
        write_json(&self.dir.join(&report_rel), &report)?;
        let pred_rel = format!("predictions/{}", artifact_name(&model.name, tag, "csv"));
        write_prediction_csv(&self.dir.join(&pred_rel), &keys, &prediction.labels, prediction.scores.as_ref(), &schema)?;
        let pred = label_matrix(&prediction.labels, schema.len())?;
        let table = build_error_table(pred.view(), gold.view(), &keys, &schema)?;
        let err_rel = format!("errors/{}", artifact_name(&model.name, tag, "tsv"));
        write_text(&self.dir.join(&err_rel), &table.to_tsv())?;
        let tp_rel = format!("throughput/{}", artifact_name(&model.name, tag, "json"));
        write_json(&self.dir.join(&tp_rel), &prediction.timing)?;
        tracing::info!(
            model = %model.name,
            dataset = %tag,
            cases_per_second = prediction.timing.cases_per_second,
            "inference throughput"
        );
        self.events.emit(
            "evaluated",
            json!({
                "model": model.name, "dataset": tag.to_string(),
                "macro_f1": report.metrics.get("macro_f1").map(|c| c.point),
                "cases_per_second": prediction.timing.cases_per_second,
            }),
        );
        if !self.manifest.reports.contains(&report_rel) {
            self.manifest.reports.push(report_rel.clone());
        }
        rels.extend([report_rel, pred_rel, err_rel, tp_rel]);
        Ok(rels)
    }

    fn write_summary(&mut self) -> Result<()> {
        let reports = load_reports(&self.dir, &self.manifest)?;
        let text = summary_table(&reports, b'\t', None);
        let path = self.dir.join(SUMMARY_FILE);
        let unchanged = std::fs::read_to_string(&path).map(|t| t == text).unwrap_or(false);
        if !unchanged {
            // the set of reports changed since the summary was written
            self.manifest.stages.retain(|s| s.name != "report");
        }
        self.stage("report", move |r| {
            write_text(&r.dir.join(SUMMARY_FILE), &text)?;
            Ok(vec![SUMMARY_FILE.to_string()])
        })
    }

    fn find_model(&self, name: Option<&str>) -> Result<ModelConfig> {
        match name {
            Some(n) => self
                .config
                .models
                .iter()
                .find(|m| m.name == n)
                .cloned()
                .ok_or_else(|| AppError::Usage(format!("config has no model `{n}`"))),
            None => Ok(self.config.models[0].clone()),
        }
    }

    /// Labels an unlabeled record file with a trained model; writes the
    /// prediction CSV at `out`, confined to the run directory.
    pub fn predict_file(&mut self, model: Option<&str>, input: &Path, out: &Path) -> Result<(PathBuf, usize)> {
        let model = self.find_model(model)?;
        let out = confine(&self.dir, out)?;
        self.run(&RunOptions { until: Until::Train, models: Some(vec![model.name.clone()]), fresh: false })?;
        self.load_model(&model)?;
        let schema_map = match &self.config.dataset {
            DatasetConfig::Files { schema_map, .. } => schema_map.clone(),
            DatasetConfig::Synthetic { .. } => Default::default(),
        };
        let (rows, excluded) = read_prediction_input(input, &schema_map, &self.config.text)?;
        if excluded > 0 {
            tracing::warn!(excluded, "input rows without cause text were skipped");
        }
        let schema = self.config.schema.clone();
        let prediction = match &model.family {
            FamilyConfig::Llm { client, prompt, max_retries, .. } => {
                let pool_cases = self.validation_cases()?;
                let pool = ExemplarPool::from_cases(&pool_cases, &schema);
                let Trained::Llm { model_id } = &self.models[&model.name].trained else { unreachable!() };
                if matches!(client, crate::config::ClientConfig::GoldEcho) {
                    return Err(AppError::Usage("gold_echo has no answers for unlabeled input".into()));
                }
                let c = families::llm_client(client, model_id, &[], &schema)?;
                families::predict_llm(c.as_ref(), &rows, prompt, &pool, &schema, *max_retries)?
            }
            _ => {
                let texts: Vec<&str> = rows.iter().map(|(_, t)| t.as_str()).collect();
                families::predict(&self.models[&model.name].trained, &texts)?
            }
        };
        let keys: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
        write_prediction_csv(&out, &keys, &prediction.labels, prediction.scores.as_ref(), &schema)?;
        self.record_output(&out)?;
        self.events.emit("predicted", json!({"model": model.name, "rows": keys.len(), "out": out.display().to_string()}));
        Ok((out, keys.len()))
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.dir).expect("confined").to_string_lossy().replace('\\', "/");
        self.manifest.record_artifacts(&self.dir, &[rel])?;
        self.manifest.save(&self.dir)
    }

    /// Integrated-gradients attributions for internal test cases.
    pub fn explain(&mut self, request: &ExplainRequest) -> Result<PathBuf> {
        let model = self.find_model(request.model.as_deref())?;
        if !matches!(model.family, FamilyConfig::Encoder { .. }) {
            return Err(AppError::Usage(format!("{}: explain needs an encoder model", model.name)));
        }
        let out = confine(&self.dir, &request.out)?;
        self.run(&RunOptions { until: Until::Train, models: Some(vec![model.name.clone()]), fresh: false })?;
        self.load_model(&model)?;
        let (test, _) = self.eval_cases(DatasetTag::InternalTest)?;
        let chosen: Vec<&LabeledCase> = if request.cases.is_empty() {
            test.iter().take(request.n).collect()
        } else {
            request
                .cases
                .iter()
                .map(|k| {
                    test.iter()
                        .find(|c| &c.key() == k)
                        .ok_or_else(|| AppError::Usage(format!("case `{k}` is not in the internal test split")))
                })
                .collect::<Result<_>>()?
        };
        let Trained::Encoder { model: enc, batch_size } = &self.models[&model.name].trained else { unreachable!() };
        let texts: Vec<&str> = chosen.iter().map(|c| c.normalized_text.as_str()).collect();
        let targets = match &request.class {
            Some(c) => vec![c.clone(); chosen.len()],
            None => families::top_class(&enc.predict(&texts, *batch_size)?.1, &enc.schema),
        };
        let mut maps = Vec::new();
        for ((c, text), target) in chosen.iter().zip(&texts).zip(&targets) {
            let mut m = attribute_tokens(enc, text, target, request.steps)?;
            m.case_id = Some(c.key());
            maps.push(m);
        }
        write_text(&out, &render_attribution_report(&maps, request.format))?;
        let json_out = out.with_extension("json");
        write_json(&json_out, &maps)?;
        self.record_output(&out)?;
        self.record_output(&json_out)?;
        self.events.emit("explained", json!({"model": model.name, "cases": maps.len()}));
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ExplainRequest {
    pub model: Option<String>,
    pub cases: Vec<String>,
    pub n: usize,
    pub class: Option<String>,
    pub steps: usize,
    pub format: ReportFormat,
    pub out: PathBuf,
}

/// Metric reports listed in a run manifest, verified against the inventory.
pub fn load_reports(dir: &Path, manifest: &RunManifest) -> Result<Vec<MetricReport>> {
    manifest
        .reports
        .iter()
        .map(|rel| {
            manifest.verify_artifact(dir, rel)?;
            let p = dir.join(rel);
            let text = std::fs::read_to_string(&p).map_err(|e| AppError::io(&p, e))?;
            serde_json::from_str(&text).map_err(|e| AppError::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}

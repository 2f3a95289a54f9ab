//! Multi-label fine-tuning, batched inference and thresholding.

use std::time::Instant;

use codtox_core::metrics::{macro_f1, subset_accuracy, F1Mode};
use codtox_core::schema::label_matrix;
use codtox_core::{LabelSchema, LabelVector, LabeledCase};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bert::{Batch, Bert};
use crate::error::{EncoderError, Result};
use crate::model::{EncoderClassifier, PretrainedEncoder};
use crate::tape::{Mat, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    ValidationMacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub encoder_id: String,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub selection_metric: SelectionMetric,
    pub threshold: f64,
    pub seed: u64,
    /// Caps the encoder's native length limit.
    pub max_length: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Fraction of steps with linear warm-up before the linear decay.
    pub warmup_ratio: f64,
    pub repair_implications: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            encoder_id: String::new(),
            batch_size: 32,
            weight_decay: 0.01,
            learning_rate: 2e-5,
            epochs: 5,
            selection_metric: SelectionMetric::ValidationMacroF1,
            threshold: 0.5,
            seed: 0,
            max_length: None,
            max_grad_norm: 1.0,
            warmup_ratio: 0.0,
            repair_implications: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if matches!(self.max_length, Some(n) if n < 3) {
            return bad("max_length must be at least 3");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_macro_f1: f64,
    pub validation_subset_accuracy: f64,
    pub seconds: f64,
}

pub struct FineTuneOutcome {
    pub model: EncoderClassifier,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl FineTuneOutcome {
    pub fn best(&self) -> &EpochLog {
        &self.log[self.best_epoch - 1]
    }
}

/// AdamW with decoupled weight decay, skipped for biases and LayerNorm.
pub struct AdamW {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(bert: &Bert, weight_decay: f64) -> Self {
        let p = &bert.params;
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
            step: 0,
            m: (0..p.len()).map(|i| Mat::zeros(p.value(i).dim())).collect(),
            v: (0..p.len()).map(|i| Mat::zeros(p.value(i).dim())).collect(),
            decay: (0..p.len()).map(|i| !bert.is_no_decay(i)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut self.m[i]).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut self.v[i]).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let decay = if self.decay[i] { lr * self.weight_decay } else { 0.0 };
            ndarray::Zip::from(params.value_mut(i))
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= decay * *p;
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Linear warm-up to 1 over `warmup * total` steps, then linear decay to 0.
fn lr_factor(step: f64, total: f64, warmup: f64) -> f64 {
    let w = (warmup * total).floor();
    if step < w {
        (step + 1.0) / w
    } else {
        ((total - step) / (total - w).max(1.0)).max(0.0)
    }
}

fn targets(cases: &[&LabeledCase], width: usize) -> Result<Mat> {
    let mut t = Mat::zeros((cases.len(), width));
    for (i, c) in cases.iter().enumerate() {
        if c.gold.len() != width {
            return Err(EncoderError::Shape(format!(
                "case {} has {} labels, schema has {width}",
                c.key(),
                c.gold.len()
            )));
        }
        for (j, &b) in c.gold.bits().iter().enumerate() {
            t[[i, j]] = f32::from(b);
        }
    }
    Ok(t)
}

/// Fine-tunes `encoder` with a fresh sigmoid head over `schema`, keeping
/// the epoch with the best validation macro F1.
pub fn finetune_encoder(
    encoder: &PretrainedEncoder,
    train: &[LabeledCase],
    validation: &[LabeledCase],
    schema: &LabelSchema,
    config: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(EncoderError::Training("empty training split".into()));
    }
    if validation.is_empty() {
        return Err(EncoderError::Training("empty validation split".into()));
    }
    let width = schema.len();
    let max_length = config.max_length.map_or(encoder.max_length(), |m| m.min(encoder.max_length()));
    let bert = encoder.instantiate(width, config.seed)?;
    let mut current = EncoderClassifier::new(
        bert,
        encoder.tokenizer.clone(),
        schema.clone(),
        config.clone(),
        max_length,
        encoder.source.clone(),
    )?;

    let encoded: Vec<Vec<usize>> = train
        .iter()
        .map(|c| encoder.tokenizer.encode(&c.normalized_text, max_length))
        .map(|e| e.ids)
        .collect();
    let val_gold = label_matrix(&validation.iter().map(|c| c.gold.clone()).collect::<Vec<_>>(), width)?;
    let val_texts: Vec<&str> = validation.iter().map(|c| c.normalized_text.as_str()).collect();

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut opt = AdamW::new(&current.bert, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = 0usize;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Bert)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let batch = Batch::pad(&seqs, encoder.tokenizer.pad_id());
            let cases: Vec<&LabeledCase> = chunk.iter().map(|&i| &train[i]).collect();
            let y = targets(&cases, width)?;
            let mut grads = {
                let mut tape = Tape::new(&current.bert.params);
                let logits = current.bert.logits(&mut tape, &batch);
                let loss = tape.bce_with_logits(logits, &y);
                let l = f64::from(tape.value(loss)[[0, 0]]);
                if !l.is_finite() {
                    return Err(EncoderError::Training(format!("non-finite loss at epoch {epoch}")));
                }
                loss_sum += l;
                tape.backward(loss).params
            };
            clip_grad_norm(&mut grads, config.max_grad_norm);
            let lr = config.learning_rate * lr_factor(step as f64, total_steps, config.warmup_ratio);
            opt.step(&mut current.bert.params, &grads, lr as f32);
            step += 1;
        }
        let probs = predict_probabilities(&current, &val_texts, config.batch_size)?;
        let pred = label_matrix(&threshold_labels(probs.view(), config.threshold)?, width)?;
        let f1 = macro_f1(pred.view(), val_gold.view(), F1Mode::OverLabels)?;
        let acc = subset_accuracy(pred.view(), val_gold.view())?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            validation_macro_f1: f1,
            validation_subset_accuracy: acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            train_loss = entry.train_loss,
            val_macro_f1 = f1,
            val_subset_accuracy = acc,
            "fine-tune epoch"
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, current.bert.clone()));
        }
    }
    let (_, best_epoch, bert) = best.expect("at least one epoch");
    current.bert = bert;
    if !current.bert.params.all_finite() {
        return Err(EncoderError::Training("non-finite weights after training".into()));
    }
    Ok(FineTuneOutcome { model: current, log, best_epoch })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub n_texts: usize,
    pub n_batches: usize,
    pub total_seconds: f64,
    pub batch_seconds: Vec<f64>,
    pub truncated: usize,
}

/// Per-class probabilities, rows in input order, columns in schema order.
pub fn predict_probabilities(model: &EncoderClassifier, texts: &[&str], batch_size: usize) -> Result<Array2<f64>> {
    predict_probabilities_timed(model, texts, batch_size).map(|(p, _)| p)
}

pub fn predict_probabilities_timed(
    model: &EncoderClassifier,
    texts: &[&str],
    batch_size: usize,
) -> Result<(Array2<f64>, Throughput)> {
    if batch_size == 0 {
        return Err(EncoderError::Config("batch_size must be positive".into()));
    }
    let width = model.num_labels();
    let mut out = Array2::zeros((texts.len(), width));
    let mut timing = Throughput { n_texts: texts.len(), ..Default::default() };
    let started = Instant::now();
    for (b, chunk) in texts.chunks(batch_size).enumerate() {
        let t0 = Instant::now();
        let enc: Vec<_> = chunk.iter().map(|t| model.tokenizer.encode(t, model.max_length)).collect();
        timing.truncated += enc.iter().filter(|e| e.truncated).count();
        let seqs: Vec<Vec<usize>> = enc.into_iter().map(|e| e.ids).collect();
        let logits = model.bert.forward_logits(&Batch::pad(&seqs, model.tokenizer.pad_id()));
        for (i, row) in logits.rows().into_iter().enumerate() {
            for (j, &z) in row.iter().enumerate() {
                out[[b * batch_size + i, j]] = 1.0 / (1.0 + (-f64::from(z)).exp());
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        tracing::debug!(batch = b, size = chunk.len(), seconds = secs, "inference batch");
        timing.batch_seconds.push(secs);
    }
    timing.n_batches = timing.batch_seconds.len();
    timing.total_seconds = started.elapsed().as_secs_f64();
    if timing.truncated > 0 {
        tracing::warn!(count = timing.truncated, max_length = model.max_length, "texts truncated to encoder limit");
    }
    tracing::info!(n = texts.len(), seconds = timing.total_seconds, "encoder inference");
    Ok((out, timing))
}

/// Bit j is set iff `probs[i][j] >= threshold`.
pub fn threshold_labels(probs: ArrayView2<f64>, threshold: f64) -> Result<Vec<LabelVector>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EncoderError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    probs
        .rows()
        .into_iter()
        .map(|r| LabelVector::new(r.iter().map(|&p| u8::from(p >= threshold)).collect()).map_err(Into::into))
        .collect()
}

/// Sets every parent class whose child is set, following chains.
pub fn repair_implications(labels: &mut [LabelVector], schema: &LabelSchema) {
    let edges = schema.edge_indices();
    for v in labels.iter_mut() {
        loop {
            let mut changed = false;
            for &(child, parent) in &edges {
                if v.get(child) && !v.get(parent) {
                    v.set(parent, true);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
}

impl EncoderClassifier {
    /// Thresholded labels plus probabilities, with optional implication repair.
    pub fn predict(&self, texts: &[&str], batch_size: usize) -> Result<(Vec<LabelVector>, Array2<f64>)> {
        let probs = predict_probabilities(self, texts, batch_size)?;
        let mut labels = threshold_labels(probs.view(), self.config.threshold)?;
        if self.config.repair_implications {
            repair_implications(&mut labels, &self.schema);
        }
        Ok((labels, probs))
    }
}

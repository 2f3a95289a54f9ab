//! BERT-style encoder with a pooled multi-label classification head.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};
use crate::safetensors::{self, Tensor};
use crate::tape::{Mat, ParamStore, Tape, Var};

fn default_eps() -> f32 {
    1e-12
}

fn default_type_vocab() -> usize {
    2
}

fn default_init_range() -> f32 {
    0.02
}

fn default_act() -> String {
    "gelu".into()
}

/// Field names follow the usual `config.json` of pretrained checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default)]
    pub pad_token_id: usize,
    /// Standard deviation of freshly initialized weight matrices.
    #[serde(default = "default_init_range")]
    pub initializer_range: f32,
}

impl BertConfig {
    /// Two layers, hidden size 128, for tests and smoke runs. The wider
    /// initialization breaks attention symmetry so it trains from scratch.
    pub fn tiny(vocab_size: usize) -> Self {
        BertConfig {
            vocab_size,
            hidden_size: 128,
            num_hidden_layers: 2,
            num_attention_heads: 8,
            intermediate_size: 256,
            max_position_embeddings: 64,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_act: "gelu".into(),
            pad_token_id: 0,
            initializer_range: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.hidden_size == 0 || self.num_attention_heads == 0 || self.vocab_size == 0 {
            return bad("hidden_size, num_attention_heads and vocab_size must be positive".into());
        }
        if self.hidden_size % self.num_attention_heads != 0 {
            return bad(format!(
                "hidden_size {} not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            ));
        }
        if self.max_position_embeddings < 3 {
            return bad("max_position_embeddings must allow [CLS] x [SEP]".into());
        }
        if !(self.initializer_range > 0.0 && self.initializer_range.is_finite()) {
            return bad("initializer_range must be positive".into());
        }
        if self.hidden_act != "gelu" {
            return bad(format!("unsupported activation {:?}", self.hidden_act));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct LayerIds {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    attn_out: (usize, usize),
    attn_ln: (usize, usize),
    inter: (usize, usize),
    out: (usize, usize),
    out_ln: (usize, usize),
}

#[derive(Clone)]
struct Ids {
    word: usize,
    position: usize,
    token_type: usize,
    emb_ln: (usize, usize),
    layers: Vec<LayerIds>,
    pooler: (usize, usize),
    classifier: (usize, usize),
}

/// A padded batch of token ids, `batch` rows of equal length `seq`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn pad(sequences: &[Vec<usize>], pad_id: usize) -> Self {
        let seq = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sequences.len() * seq);
        let mut valid = Vec::with_capacity(sequences.len() * seq);
        for s in sequences {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, seq - s.len()));
            valid.extend(std::iter::repeat_n(false, seq - s.len()));
        }
        Batch { ids, valid, batch: sequences.len(), seq }
    }
}

#[derive(Clone)]
pub struct Bert {
    pub config: BertConfig,
    pub num_labels: usize,
    pub params: ParamStore,
    ids: Ids,
}

/// Vector-valued parameters, stored `1 x n` here but 1-D on disk.
fn is_vector(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("LayerNorm")
}

fn param_names(config: &BertConfig) -> Vec<(String, (usize, usize))> {
    let h = config.hidden_size;
    let mut v = vec![
        ("bert.embeddings.word_embeddings.weight".to_string(), (config.vocab_size, h)),
        ("bert.embeddings.position_embeddings.weight".to_string(), (config.max_position_embeddings, h)),
        ("bert.embeddings.token_type_embeddings.weight".to_string(), (config.type_vocab_size, h)),
        ("bert.embeddings.LayerNorm.weight".to_string(), (1, h)),
        ("bert.embeddings.LayerNorm.bias".to_string(), (1, h)),
    ];
    for i in 0..config.num_hidden_layers {
        let p = format!("bert.encoder.layer.{i}");
        for (name, shape) in [
            ("attention.self.query", (h, h)),
            ("attention.self.key", (h, h)),
            ("attention.self.value", (h, h)),
            ("attention.output.dense", (h, h)),
            ("intermediate.dense", (config.intermediate_size, h)),
            ("output.dense", (h, config.intermediate_size)),
        ] {
            v.push((format!("{p}.{name}.weight"), shape));
            v.push((format!("{p}.{name}.bias"), (1, shape.0)));
        }
        for ln in ["attention.output.LayerNorm", "output.LayerNorm"] {
            v.push((format!("{p}.{ln}.weight"), (1, h)));
            v.push((format!("{p}.{ln}.bias"), (1, h)));
        }
    }
    v.push(("bert.pooler.dense.weight".to_string(), (h, h)));
    v.push(("bert.pooler.dense.bias".to_string(), (1, h)));
    v
}

fn head_names(num_labels: usize, h: usize) -> [(String, (usize, usize)); 2] {
    [
        ("classifier.weight".to_string(), (num_labels, h)),
        ("classifier.bias".to_string(), (1, num_labels)),
    ]
}

fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    let u1: f32 = rng.random::<f32>().max(f32::MIN_POSITIVE);
    let u2: f32 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Fresh initial value: N(0, std) matrices, unit LayerNorm scales, zero biases.
fn init_value(name: &str, shape: (usize, usize), std: f32, rng: &mut ChaCha8Rng) -> Mat {
    if name.contains("LayerNorm") && name.ends_with(".weight") {
        Mat::ones(shape)
    } else if name.ends_with(".bias") {
        Mat::zeros(shape)
    } else {
        Mat::from_shape_simple_fn(shape, || normal(rng, std))
    }
}

/// Alternative spellings found in older or headless checkpoints.
fn aliases(name: &str) -> Vec<String> {
    let mut out = vec![name.to_string()];
    let legacy = name
        .replace("LayerNorm.weight", "LayerNorm.gamma")
        .replace("LayerNorm.bias", "LayerNorm.beta");
    if legacy != name {
        out.push(legacy.clone());
    }
    if let Some(stripped) = name.strip_prefix("bert.") {
        out.push(stripped.to_string());
        if legacy != name {
            out.push(legacy.strip_prefix("bert.").unwrap().to_string());
        }
    }
    out
}

impl Bert {
    fn resolve(config: BertConfig, num_labels: usize, params: ParamStore) -> Self {
        let id = |n: String| params.id(&n).expect("parameter registered");
        let lin = |p: &str| (id(format!("{p}.weight")), id(format!("{p}.bias")));
        let layers = (0..config.num_hidden_layers)
            .map(|i| {
                let p = format!("bert.encoder.layer.{i}");
                LayerIds {
                    q: lin(&format!("{p}.attention.self.query")),
                    k: lin(&format!("{p}.attention.self.key")),
                    v: lin(&format!("{p}.attention.self.value")),
                    attn_out: lin(&format!("{p}.attention.output.dense")),
                    attn_ln: lin(&format!("{p}.attention.output.LayerNorm")),
                    inter: lin(&format!("{p}.intermediate.dense")),
                    out: lin(&format!("{p}.output.dense")),
                    out_ln: lin(&format!("{p}.output.LayerNorm")),
                }
            })
            .collect();
        let ids = Ids {
            word: id("bert.embeddings.word_embeddings.weight".into()),
            position: id("bert.embeddings.position_embeddings.weight".into()),
            token_type: id("bert.embeddings.token_type_embeddings.weight".into()),
            emb_ln: lin("bert.embeddings.LayerNorm"),
            layers,
            pooler: lin("bert.pooler.dense"),
            classifier: lin("classifier"),
        };
        Bert { config, num_labels, params, ids }
    }

    /// Randomly initialized encoder and head.
    pub fn random(config: BertConfig, num_labels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_names(&config).into_iter().chain(head_names(num_labels, config.hidden_size)) {
            let v = init_value(&name, shape, config.initializer_range, &mut rng);
            params.insert(&name, v);
        }
        Ok(Self::resolve(config, num_labels, params))
    }

    /// Loads encoder weights; the classification head (and a missing pooler)
    /// is freshly initialized from `seed` unless the tensors are present with
    /// the right shape.
    pub fn from_tensors(
        config: BertConfig,
        num_labels: usize,
        tensors: &BTreeMap<String, Tensor>,
        seed: u64,
        origin: &Path,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut fresh = Vec::new();
        for (name, shape) in param_names(&config).into_iter().chain(head_names(num_labels, config.hidden_size)) {
            let found = aliases(&name).into_iter().find_map(|a| tensors.get(&a));
            let optional = name.starts_with("classifier") || name.starts_with("bert.pooler");
            let value = match found {
                Some(t) if t.numel() == shape.0 * shape.1 => {
                    Mat::from_shape_vec(shape, t.data.clone()).expect("size checked")
                }
                Some(_) if name.starts_with("classifier") => {
                    fresh.push(name.clone());
                    init_value(&name, shape, config.initializer_range, &mut rng)
                }
                Some(t) => {
                    return Err(EncoderError::format(
                        origin,
                        format!("{name}: shape {:?}, expected {shape:?}", t.shape),
                    ))
                }
                None if optional => {
                    fresh.push(name.clone());
                    init_value(&name, shape, config.initializer_range, &mut rng)
                }
                None => return Err(EncoderError::format(origin, format!("missing tensor {name}"))),
            };
            params.insert(&name, value);
        }
        if fresh.iter().any(|n| n.starts_with("bert.pooler")) {
            tracing::warn!(path = %origin.display(), "checkpoint has no pooler; initialized randomly");
        }
        if !params.all_finite() {
            return Err(EncoderError::format(origin, "non-finite weights"));
        }
        Ok(Self::resolve(config, num_labels, params))
    }

    pub fn load_weights(config: BertConfig, num_labels: usize, path: &Path, seed: u64) -> Result<Self> {
        let tensors = safetensors::read(path)?;
        Self::from_tensors(config, num_labels, &tensors, seed, path)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let tensors = self
            .params
            .iter()
            .map(|(name, m)| {
                let shape = if is_vector(name) { vec![m.len()] } else { vec![m.nrows(), m.ncols()] };
                (name.to_string(), Tensor { shape, data: m.iter().copied().collect() })
            })
            .collect();
        safetensors::write(path, &tensors)
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn word_embedding_id(&self) -> usize {
        self.ids.word
    }

    /// Word-embedding lookup, the point where attribution enters.
    pub fn word_embeddings(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        tape.gather(self.ids.word, ids)
    }

    /// Final hidden states (`batch*seq x hidden`) from word embeddings.
    pub fn encode(&self, tape: &mut Tape, words: Var, batch: usize, seq: usize, valid: &[bool]) -> Var {
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.gather(self.ids.position, &positions);
        let types = tape.gather(self.ids.token_type, &vec![0; batch * seq]);
        let eps = self.config.layer_norm_eps;
        let mut h = tape.add(words, pos);
        h = tape.add(h, types);
        h = tape.layer_norm(h, self.ids.emb_ln.0, self.ids.emb_ln.1, eps);
        let heads = self.config.num_attention_heads;
        for l in &self.ids.layers {
            let q = tape.linear(h, l.q.0, Some(l.q.1));
            let k = tape.linear(h, l.k.0, Some(l.k.1));
            let v = tape.linear(h, l.v.0, Some(l.v.1));
            let a = tape.attention(q, k, v, batch, seq, heads, valid);
            let a = tape.linear(a, l.attn_out.0, Some(l.attn_out.1));
            let a = tape.add(a, h);
            let a = tape.layer_norm(a, l.attn_ln.0, l.attn_ln.1, eps);
            let f = tape.linear(a, l.inter.0, Some(l.inter.1));
            let f = tape.gelu(f);
            let f = tape.linear(f, l.out.0, Some(l.out.1));
            let f = tape.add(f, a);
            h = tape.layer_norm(f, l.out_ln.0, l.out_ln.1, eps);
        }
        h
    }

    /// Pooled `[CLS]` state through the head: `batch x num_labels` logits.
    pub fn classify(&self, tape: &mut Tape, hidden: Var, batch: usize, seq: usize) -> Var {
        let cls: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let c = tape.select_rows(hidden, &cls);
        let p = tape.linear(c, self.ids.pooler.0, Some(self.ids.pooler.1));
        let p = tape.tanh(p);
        tape.linear(p, self.ids.classifier.0, Some(self.ids.classifier.1))
    }

    pub fn logits(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let words = self.word_embeddings(tape, &batch.ids);
        let hidden = self.encode(tape, words, batch.batch, batch.seq, &batch.valid);
        self.classify(tape, hidden, batch.batch, batch.seq)
    }

    /// Inference-only logits.
    pub fn forward_logits(&self, batch: &Batch) -> Array2<f32> {
        let mut tape = Tape::new(&self.params);
        tape.track_params = false;
        let out = self.logits(&mut tape, batch);
        tape.value(out).clone()
    }

    /// Logits for one sequence given its word-embedding rows directly.
    pub fn logits_from_embeddings(&self, words: Mat) -> Array2<f32> {
        let seq = words.nrows();
        let mut tape = Tape::new(&self.params);
        tape.track_params = false;
        let w = tape.input(words, false);
        let h = self.encode(&mut tape, w, 1, seq, &vec![true; seq]);
        let out = self.classify(&mut tape, h, 1, seq);
        tape.value(out).clone()
    }

    /// Word-embedding rows for `ids`.
    pub fn embedding_rows(&self, ids: &[usize]) -> Mat {
        self.params.value(self.ids.word).select(ndarray::Axis(0), ids)
    }

    pub fn is_no_decay(&self, param: usize) -> bool {
        is_vector(self.params.name(param))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_model_shapes() {
        let m = Bert::random(BertConfig::tiny(50), 10, 1).unwrap();
        let batch = Batch::pad(&[vec![2, 7, 8, 3], vec![2, 9, 3]], 0);
        let out = m.forward_logits(&batch);
        assert_eq!(out.dim(), (2, 10));
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(m.params.id("classifier.weight").map(|i| m.params.value(i).dim()), Some((10, 128)));
    }

    #[test]
    fn padding_does_not_change_logits() {
        let m = Bert::random(BertConfig::tiny(50), 3, 2).unwrap();
        let alone = m.forward_logits(&Batch::pad(&[vec![2, 9, 3]], 0));
        let padded = m.forward_logits(&Batch::pad(&[vec![2, 9, 3], vec![2, 5, 6, 7, 8, 3]], 0));
        for j in 0..3 {
            assert!((alone[[0, j]] - padded[[0, j]]).abs() < 1e-5);
        }
    }

    #[test]
    fn weights_roundtrip_and_aliases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let cfg = BertConfig::tiny(40);
        let m = Bert::random(cfg.clone(), 4, 3).unwrap();
        m.save_weights(&path).unwrap();
        let back = Bert::load_weights(cfg.clone(), 4, &path, 99).unwrap();
        assert_eq!(back.params, m.params);

        // A headless checkpoint under legacy names loads with a fresh head.
        let mut tensors = safetensors::read(&path).unwrap();
        tensors.retain(|k, _| !k.starts_with("classifier"));
        let renamed: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .map(|(k, v)| (k.strip_prefix("bert.").unwrap().replace("LayerNorm.weight", "LayerNorm.gamma"), v))
            .collect();
        let loaded = Bert::from_tensors(cfg.clone(), 6, &renamed, 5, &path).unwrap();
        let wid = loaded.params.id("bert.embeddings.word_embeddings.weight").unwrap();
        assert_eq!(loaded.params.value(wid), m.params.value(m.word_embedding_id()));
        assert_eq!(loaded.num_labels, 6);

        let mut broken = renamed.clone();
        broken.remove("encoder.layer.0.output.dense.weight");
        let err = Bert::from_tensors(cfg, 6, &broken, 5, &path).err().unwrap();
        assert!(err.to_string().contains("missing tensor"));
    }

    #[test]
    fn config_parses_pretrained_json() {
        let json = r#"{"architectures":["BertForMaskedLM"],"attention_probs_dropout_prob":0.1,
            "hidden_act":"gelu","hidden_size":768,"intermediate_size":3072,"layer_norm_eps":1e-12,
            "max_position_embeddings":512,"model_type":"bert","num_attention_heads":12,
            "num_hidden_layers":12,"pad_token_id":0,"type_vocab_size":2,"vocab_size":28996}"#;
        let c: BertConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.hidden_size, 768);
        assert_eq!(c.vocab_size, 28996);
        c.validate().unwrap();
        let bad = BertConfig { num_attention_heads: 5, ..c };
        assert!(bad.validate().is_err());
    }
}

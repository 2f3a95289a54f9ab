//! Document vectors from the final hidden layer of an encoder.

use codtox_core::embed::{Backend, DocumentEmbedder, DocumentVector};
use codtox_core::CoreError;

use crate::bert::{Batch, Bert};
use crate::error::Result;
use crate::model::PretrainedEncoder;
use crate::tape::Tape;
use crate::wordpiece::{WordPiece, UNK};

/// Mean of final-layer states over all non-pad positions, `[CLS]` and
/// `[SEP]` included.
pub struct ContextualEmbedder {
    bert: Bert,
    tokenizer: WordPiece,
    max_length: usize,
    pub batch_size: usize,
}

impl ContextualEmbedder {
    pub fn new(encoder: &PretrainedEncoder, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(crate::EncoderError::Config("batch_size must be positive".into()));
        }
        Ok(ContextualEmbedder {
            bert: encoder.instantiate(1, 0)?,
            tokenizer: encoder.tokenizer.clone(),
            max_length: encoder.max_length(),
            batch_size,
        })
    }
}

impl DocumentEmbedder for ContextualEmbedder {
    fn backend(&self) -> Backend {
        Backend::Contextual
    }

    fn dim(&self) -> usize {
        self.bert.hidden_size()
    }

    fn embed(&self, texts: &[&str]) -> codtox_core::Result<Vec<DocumentVector>> {
        let unk = self.tokenizer.id(UNK);
        let mut out = Vec::with_capacity(texts.len());
        let mut truncated = 0;
        for chunk in texts.chunks(self.batch_size) {
            let enc: Vec<_> = chunk.iter().map(|t| self.tokenizer.encode(t, self.max_length)).collect();
            truncated += enc.iter().filter(|e| e.truncated).count();
            let seqs: Vec<Vec<usize>> = enc.iter().map(|e| e.ids.clone()).collect();
            let batch = Batch::pad(&seqs, self.tokenizer.pad_id());
            let mut tape = Tape::new(&self.bert.params);
            tape.track_params = false;
            let words = self.bert.word_embeddings(&mut tape, &batch.ids);
            let hidden = self.bert.encode(&mut tape, words, batch.batch, batch.seq, &batch.valid);
            let h = tape.value(hidden);
            for (b, e) in enc.iter().enumerate() {
                let n = e.ids.len();
                let mut values = vec![0.0f64; self.dim()];
                for r in 0..n {
                    for (v, &x) in values.iter_mut().zip(h.row(b * batch.seq + r)) {
                        *v += f64::from(x);
                    }
                }
                values.iter_mut().for_each(|v| *v /= n as f64);
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Validation("non-finite contextual embedding".into()));
                }
                out.push(DocumentVector {
                    values,
                    backend: Backend::Contextual,
                    oov_count: e.ids.iter().filter(|&&i| Some(i) == unk).count(),
                    empty: n <= 2,
                });
            }
        }
        if truncated > 0 {
            tracing::warn!(count = truncated, max_length = self.max_length, "texts truncated to encoder limit");
        }
        Ok(out)
    }
}

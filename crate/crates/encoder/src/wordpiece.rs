//! WordPiece tokenizer compatible with uncased BERT vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{EncoderError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const CONTINUATION: &str = "##";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Tokens were dropped to fit the length limit.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordPiece {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub lowercase: bool,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Whitespace split, then every punctuation character becomes its own word.
pub fn basic_split(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase { text.to_lowercase() } else { text.to_string() };
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars().filter(|c| !c.is_control()) {
            if is_punct(c) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

impl WordPiece {
    pub fn new(vocab: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            index.entry(tok.clone()).or_insert(i);
        }
        let need = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| EncoderError::Config(format!("vocabulary lacks {t}")))
        };
        Ok(WordPiece {
            pad: need(PAD)?,
            unk: need(UNK)?,
            cls: need(CLS)?,
            sep: need(SEP)?,
            vocab,
            index,
            lowercase,
        })
    }

    /// Reads a `vocab.txt` with one token per line.
    pub fn load(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EncoderError::io(path, e))?;
        let vocab: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::new(vocab, lowercase)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.vocab.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| EncoderError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match-first split of one word.
    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => pieces.push(id),
                None => {
                    out.push(self.unk);
                    return;
                }
            }
            start = end;
        }
        out.extend(pieces);
    }

    /// Content token ids without special tokens.
    pub fn tokenize_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in basic_split(text, self.lowercase) {
            self.word_pieces(&word, &mut ids);
        }
        ids
    }

    /// `[CLS] pieces [SEP]`, tail-truncated to `max_length` total tokens.
    pub fn encode(&self, text: &str, max_length: usize) -> Encoding {
        let mut content = self.tokenize_ids(text);
        let room = max_length.saturating_sub(2);
        let truncated = content.len() > room;
        content.truncate(room);
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(self.cls);
        ids.extend(content);
        ids.push(self.sep);
        let tokens = ids.iter().map(|&i| self.vocab[i].clone()).collect();
        Encoding { ids, tokens, truncated }
    }
}

/// Builds a small vocabulary from a corpus: special tokens, words seen at
/// least `min_count` times, then single characters in both word-initial and
/// continuation form so any lowercase ASCII word can be spelled.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_count: usize) -> Vec<String> {
    let mut vocab: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in basic_split(t.as_ref(), true) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let alphabet: Vec<String> = ('a'..='z').chain('0'..='9').map(String::from).collect();
    let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
    let mut push = |tok: String, vocab: &mut Vec<String>| {
        if seen.insert(tok.clone()) {
            vocab.push(tok);
        }
    };
    for (w, _) in words {
        push(w, &mut vocab);
    }
    for c in &alphabet {
        push(c.clone(), &mut vocab);
    }
    for c in &alphabet {
        push(format!("{CONTINUATION}{c}"), &mut vocab);
    }
    for p in ['(', ')', ',', '.', '-', '/', ';', ':'] {
        push(p.to_string(), &mut vocab);
    }
    vocab
}

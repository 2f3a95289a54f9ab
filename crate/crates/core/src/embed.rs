//! Static word-vector and concept-identifier document embeddings.
//!
//! Both backends mean-pool the vectors of in-vocabulary items. Items missing
//! from the table are skipped and counted; a document with no hits becomes
//! the zero vector and is flagged.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::record::sniff_delimiter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Static,
    Cui,
    Contextual,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Static => "static",
            Backend::Cui => "cui",
            Backend::Contextual => "contextual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentVector {
    pub values: Vec<f64>,
    pub backend: Backend,
    /// Items looked up but absent from the table.
    pub oov_count: usize,
    /// Set when nothing was in vocabulary and the zero vector was returned.
    pub empty: bool,
}

impl DocumentVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Token to vector table. Keys are stored lowercased.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        VectorTable {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    /// Adds an entry. The first occurrence of a key wins.
    pub fn insert(&mut self, token: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(CoreError::Validation(format!(
                "vector for `{token}` has {} components, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Validation(format!("vector for `{token}` is not finite")));
        }
        let key = token.to_lowercase();
        if !self.index.contains_key(&key) {
            self.index.insert(key, self.data.len() / self.dim);
            self.data.extend_from_slice(vector);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        let row = match self.index.get(token) {
            Some(&r) => r,
            None => *self.index.get(&token.to_lowercase())?,
        };
        Some(&self.data[row * self.dim..(row + 1) * self.dim])
    }

    /// Loads the word-per-line text format: token, then `dim` numbers.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut table: Option<VectorTable> = None;
        let mut values = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CoreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap();
            values.clear();
            for p in parts {
                let v: f32 = p.parse().map_err(|_| CoreError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("`{p}` is not a number"),
                })?;
                values.push(v);
            }
            let table = table.get_or_insert_with(|| VectorTable::new(values.len()));
            if values.is_empty() || values.len() != table.dim {
                return Err(CoreError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!(
                        "expected {} components, found {}",
                        table.dim,
                        values.len()
                    ),
                });
            }
            table.insert(token, &values).map_err(|e| CoreError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        }
        let table = table.ok_or_else(|| CoreError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty vector file".into(),
        })?;
        tracing::info!(entries = table.len(), dim = table.dim, "loaded {}", path.display());
        Ok(table)
    }

    /// Writes the format read by [`VectorTable::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut rows: Vec<(&String, &usize)> = self.index.iter().collect();
        rows.sort_by_key(|(_, &r)| r);
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?,
        );
        for (token, &row) in rows {
            let mut line = token.clone();
            for v in &self.data[row * self.dim..(row + 1) * self.dim] {
                line.push(' ');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(|e| CoreError::io(path, e))?;
        }
        out.flush().map_err(|e| CoreError::io(path, e))
    }
}

fn mean_pool<'a, I>(items: I, table: &VectorTable, backend: Backend) -> DocumentVector
where
    I: IntoIterator<Item = &'a str>,
{
    let mut sum = vec![0.0f64; table.dim()];
    let mut hits = 0usize;
    let mut oov = 0usize;
    for item in items {
        match table.get(item) {
            Some(v) => {
                hits += 1;
                for (s, &x) in sum.iter_mut().zip(v) {
                    *s += f64::from(x);
                }
            }
            None => oov += 1,
        }
    }
    if hits > 0 {
        let n = hits as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    } else {
        tracing::debug!(oov, "document has no in-vocabulary items, using zero vector");
    }
    DocumentVector {
        values: sum,
        backend,
        oov_count: oov,
        empty: hits == 0,
    }
}

/// Mean of the vectors of in-vocabulary tokens.
pub fn embed_mean_pooled<S: AsRef<str>>(tokens: &[S], table: &VectorTable) -> DocumentVector {
    mean_pool(tokens.iter().map(AsRef::as_ref), table, Backend::Static)
}

/// Mean of the vectors of the given concept identifiers.
pub fn cuis_to_vector<S: AsRef<str>>(cuis: &[S], table: &VectorTable) -> DocumentVector {
    mean_pool(cuis.iter().map(AsRef::as_ref), table, Backend::Cui)
}

pub const DEFAULT_SEMANTIC_FILTER: &str = "organic chemical";

/// Surface-term dictionary onto concept identifiers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CuiLexicon {
    term_to_cui: HashMap<String, String>,
    cui_semantic_type: HashMap<String, String>,
    max_term_tokens: usize,
}

/// One dictionary hit: token span `[start, end)` and its identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMatch {
    pub start: usize,
    pub end: usize,
    pub cui: String,
}

fn term_key(term: &str) -> String {
    term.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl CuiLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a term. When a term is listed twice the first identifier wins.
    pub fn insert(&mut self, term: &str, cui: &str, semantic_type: &str) {
        let key = term_key(term);
        if key.is_empty() {
            return;
        }
        self.max_term_tokens = self.max_term_tokens.max(key.split(' ').count());
        self.term_to_cui.entry(key).or_insert_with(|| cui.to_string());
        self.cui_semantic_type
            .entry(cui.to_string())
            .or_insert_with(|| semantic_type.trim().to_lowercase());
    }

    pub fn len(&self) -> usize {
        self.term_to_cui.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term_to_cui.is_empty()
    }

    pub fn semantic_type(&self, cui: &str) -> Option<&str> {
        self.cui_semantic_type.get(cui).map(String::as_str)
    }

    /// Delimited rows of `term, identifier, semantic class` (tab or comma).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let delimiter = sniff_delimiter(text.lines().next().unwrap_or("")) as char;
        let mut lexicon = CuiLexicon::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.rsplitn(3, delimiter).collect();
            if fields.len() != 3 {
                return Err(CoreError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected term, identifier, semantic class".into(),
                });
            }
            // rsplitn yields fields in reverse; terms may contain commas.
            lexicon.insert(fields[2], fields[1].trim(), fields[0]);
        }
        Ok(lexicon)
    }

    /// Longest-match, left-to-right, non-overlapping dictionary scan over
    /// whitespace tokens.
    pub fn scan(&self, text: &str) -> Vec<ConceptMatch> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let mut matches = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_term_tokens.min(tokens.len() - i);
            let hit = (1..=longest).rev().find_map(|len| {
                let key = tokens[i..i + len].join(" ");
                self.term_to_cui.get(&key).map(|cui| (len, cui.clone()))
            });
            match hit {
                Some((len, cui)) => {
                    matches.push(ConceptMatch {
                        start: i,
                        end: i + len,
                        cui,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        matches
    }
}

/// Concept identifiers found in `text`, in order, keeping only those whose
/// semantic class equals `semantic_filter` (when given).
pub fn text_to_cuis(text: &str, lexicon: &CuiLexicon, semantic_filter: Option<&str>) -> Vec<String> {
    let wanted = semantic_filter.map(|f| f.trim().to_lowercase());
    lexicon
        .scan(text)
        .into_iter()
        .filter(|m| match &wanted {
            Some(w) => lexicon.semantic_type(&m.cui) == Some(w.as_str()),
            None => true,
        })
        .map(|m| m.cui)
        .collect()
}

/// Where the CUI semantic-class filter is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    /// Drop non-matching identifiers right after the dictionary scan.
    #[default]
    Extraction,
    /// Keep all identifiers from the scan; drop them when looking up vectors.
    Lookup,
}

/// Something that turns normalized texts into document vectors.
pub trait DocumentEmbedder: Send + Sync {
    fn backend(&self) -> Backend;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<DocumentVector>>;

    /// Embeds into an `N x dim` feature matrix.
    fn embed_matrix(&self, texts: &[&str]) -> Result<Array2<f64>> {
        let vectors = self.embed(texts)?;
        let dim = self.dim();
        let mut out = Array2::zeros((vectors.len(), dim));
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(CoreError::Shape(format!(
                    "embedding {i} has dim {}, expected {dim}",
                    v.dim()
                )));
            }
            for (j, &x) in v.values.iter().enumerate() {
                out[[i, j]] = x;
            }
        }
        Ok(out)
    }
}

pub struct StaticEmbedder {
    pub table: VectorTable,
}

impl DocumentEmbedder for StaticEmbedder {
    fn backend(&self) -> Backend {
        Backend::Static
    }

    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<DocumentVector>> {
        Ok(texts
            .iter()
            .map(|t| {
                let tokens: Vec<&str> = t.split_whitespace().collect();
                embed_mean_pooled(&tokens, &self.table)
            })
            .collect())
    }
}

pub struct CuiEmbedder {
    pub lexicon: CuiLexicon,
    pub table: VectorTable,
    pub semantic_filter: Option<String>,
    pub filter_stage: FilterStage,
}

impl CuiEmbedder {
    pub fn cuis(&self, text: &str) -> Vec<String> {
        let filter = self.semantic_filter.as_deref();
        match self.filter_stage {
            FilterStage::Extraction => text_to_cuis(text, &self.lexicon, filter),
            FilterStage::Lookup => {
                let all = text_to_cuis(text, &self.lexicon, None);
                match filter.map(|f| f.trim().to_lowercase()) {
                    Some(f) => all
                        .into_iter()
                        .filter(|c| self.lexicon.semantic_type(c) == Some(f.as_str()))
                        .collect(),
                    None => all,
                }
            }
        }
    }
}

impl DocumentEmbedder for CuiEmbedder {
    fn backend(&self) -> Backend {
        Backend::Cui
    }

    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<DocumentVector>> {
        Ok(texts
            .iter()
            .map(|t| cuis_to_vector(&self.cuis(t), &self.table))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ab_table() -> VectorTable {
        VectorTable::load(file("a 1.0 2.0\nb 3.0 4.0\n").path()).unwrap()
    }

    #[test]
    fn loads_word_per_line() {
        let t = ab_table();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("B"), Some(&[3.0f32, 4.0][..]));
    }

    #[test]
    fn inconsistent_dimension_names_line() {
        let mut content = String::from("x");
        content.push_str(&" 0.5".repeat(100));
        content.push_str("\ny");
        content.push_str(&" 0.5".repeat(99));
        content.push('\n');
        let err = VectorTable::load(file(&content).path()).unwrap_err();
        assert!(matches!(err, CoreError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn hundred_dim_table() {
        let mut content = String::new();
        for tok in ["the", "fentanyl"] {
            content.push_str(tok);
            content.push_str(&" 0.25".repeat(100));
            content.push('\n');
        }
        assert_eq!(VectorTable::load(file(&content).path()).unwrap().dim(), 100);
    }

    #[test]
    fn empty_file_is_error() {
        assert!(VectorTable::load(file("").path()).is_err());
    }

    #[test]
    fn save_then_load() {
        let t = ab_table();
        let out = tempfile::NamedTempFile::new().unwrap();
        t.save(out.path()).unwrap();
        assert_eq!(VectorTable::load(out.path()).unwrap(), t);
    }

    #[test]
    fn mean_pooling() {
        let t = ab_table();
        assert_eq!(embed_mean_pooled(&["a"], &t).values, vec![1.0, 2.0]);
        assert_eq!(embed_mean_pooled(&["a", "b"], &t).values, vec![2.0, 3.0]);
        let oov = embed_mean_pooled(&["zzz"], &t);
        assert_eq!(oov.values, vec![0.0, 0.0]);
        assert_eq!(oov.oov_count, 1);
        assert!(oov.empty);
        let mixed = embed_mean_pooled(&["a", "zzz"], &t);
        assert_eq!(mixed.values, vec![1.0, 2.0]);
        assert_eq!(mixed.oov_count, 1);
        assert!(!mixed.empty);
    }

    fn lexicon() -> CuiLexicon {
        let mut lex = CuiLexicon::new();
        lex.insert("fentanyl", "K1", "organic chemical");
        lex.insert("fentanyl citrate", "K2", "organic chemical");
        lex.insert("toxicity", "K3", "pathologic function");
        lex
    }

    #[test]
    fn cui_direct_hit_and_filter() {
        let mut lex = CuiLexicon::new();
        lex.insert("fentanyl", "K1", "organic chemical");
        assert_eq!(text_to_cuis("fentanyl toxicity", &lex, Some("organic chemical")), vec!["K1"]);
        let mut finding = CuiLexicon::new();
        finding.insert("fentanyl", "K1", "finding");
        assert!(text_to_cuis("fentanyl toxicity", &finding, Some("organic chemical")).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let lex = lexicon();
        assert_eq!(
            text_to_cuis("acute fentanyl citrate overdose", &lex, Some(DEFAULT_SEMANTIC_FILTER)),
            vec!["K2"]
        );
        assert_eq!(text_to_cuis("fentanyl toxicity", &lex, None), vec!["K1", "K3"]);
        assert!(text_to_cuis("nothing here", &lex, None).is_empty());
    }

    #[test]
    fn lexicon_file_allows_commas_in_terms() {
        let f = file("3,4-methylenedioxyamphetamine,C0000001,organic chemical\nheroin,C0011892,organic chemical\n");
        let lex = CuiLexicon::load(f.path()).unwrap();
        assert_eq!(text_to_cuis("3,4-methylenedioxyamphetamine heroin", &lex, None), vec!["C0000001", "C0011892"]);
    }

    #[test]
    fn cui_vectors() {
        let mut t = VectorTable::new(3);
        t.insert("K1", &[1.0, 0.0, 3.0]).unwrap();
        t.insert("K2", &[0.5, 2.0, -1.0]).unwrap();
        let one = cuis_to_vector(&["K1"], &t);
        assert_eq!(one.values, vec![1.0, 0.0, 3.0]);
        assert_eq!(one.backend, Backend::Cui);
        let none: Vec<String> = Vec::new();
        let empty = cuis_to_vector(&none, &t);
        assert!(empty.empty && empty.values == vec![0.0; 3]);
        // scalar hand computation per component
        let two = cuis_to_vector(&["K1", "K2"], &t);
        let expected = [(1.0 + 0.5) / 2.0, (0.0 + 2.0) / 2.0, (3.0 - 1.0) / 2.0];
        for (a, b) in two.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_stage_switch() {
        let mut lex = lexicon();
        lex.insert("cocaine", "K4", "organic chemical");
        let mut table = VectorTable::new(1);
        for (k, v) in [("K1", 1.0f32), ("K2", 2.0), ("K3", 10.0), ("K4", 4.0)] {
            table.insert(k, &[v]).unwrap();
        }
        for stage in [FilterStage::Extraction, FilterStage::Lookup] {
            let emb = CuiEmbedder {
                lexicon: lex.clone(),
                table: table.clone(),
                semantic_filter: Some(DEFAULT_SEMANTIC_FILTER.into()),
                filter_stage: stage,
            };
            assert_eq!(emb.cuis("fentanyl toxicity cocaine"), vec!["K1", "K4"]);
            let v = emb.embed(&["fentanyl toxicity cocaine"]).unwrap();
            assert_eq!(v[0].values, vec![2.5]);
        }
    }

    fn random_lexicon(entries: &[(Vec<u8>, u8)]) -> CuiLexicon {
        let mut lex = CuiLexicon::new();
        for (words, id) in entries {
            let term: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
            lex.insert(&term.join(" "), &format!("C{id}"), "organic chemical");
        }
        lex
    }

    proptest! {
        #[test]
        fn scan_spans_never_overlap(
            entries in prop::collection::vec((prop::collection::vec(0u8..6, 1..4), 0u8..50), 0..20),
            text in prop::collection::vec(0u8..6, 0..40),
        ) {
            let lex = random_lexicon(&entries);
            let text: Vec<String> = text.iter().map(|w| format!("w{w}")).collect();
            let matches = lex.scan(&text.join(" "));
            let mut last_end = 0;
            for m in &matches {
                prop_assert!(m.start >= last_end);
                prop_assert!(m.end > m.start && m.end <= text.len());
                last_end = m.end;
            }
        }

        #[test]
        fn pooling_is_permutation_invariant_and_finite(
            rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..8),
            picks in prop::collection::vec(0usize..12, 0..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut table = VectorTable::new(4);
            for (i, r) in rows.iter().enumerate() {
                table.insert(&format!("t{i}"), r).unwrap();
            }
            let tokens: Vec<String> = picks.iter().map(|p| format!("t{p}")).collect();
            let mut shuffled = tokens.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = embed_mean_pooled(&tokens, &table);
            let b = embed_mean_pooled(&shuffled, &table);
            prop_assert!(a.is_finite());
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let c = cuis_to_vector(&tokens, &table);
            prop_assert!(c.is_finite());
        }
    }
}

//! The ordered drug-class taxonomy and per-case binary label vectors.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Canonical class order. Matches the row set of the published error tables.
pub const DEFAULT_CLASSES: [&str; 10] = [
    "any_opioids",
    "heroin",
    "fentanyl",
    "prescription_opioids",
    "methamphetamine",
    "cocaine",
    "benzodiazepines",
    "alcohol",
    "others",
    "any_drugs",
];

/// Substances counted below this are folded into `others`.
pub const DEFAULT_RARE_CUTOFF: u64 = 1000;

/// Name of the catch-all class for rare substances.
pub const OTHERS_CLASS: &str = "others";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub classes: Vec<String>,
    /// `(child, parent)` pairs: a positive child implies a positive parent.
    pub implication_edges: Vec<(String, String)>,
    pub rare_cutoff: u64,
}

impl Default for LabelSchema {
    fn default() -> Self {
        let classes: Vec<String> = DEFAULT_CLASSES.iter().map(|c| c.to_string()).collect();
        let mut edges = Vec::new();
        for child in ["heroin", "fentanyl", "prescription_opioids"] {
            edges.push((child.to_string(), "any_opioids".to_string()));
        }
        for class in &classes {
            if class != "any_drugs" {
                edges.push((class.clone(), "any_drugs".to_string()));
            }
        }
        LabelSchema {
            classes,
            implication_edges: edges,
            rare_cutoff: DEFAULT_RARE_CUTOFF,
        }
    }
}

impl LabelSchema {
    pub fn new(
        classes: Vec<String>,
        implication_edges: Vec<(String, String)>,
        rare_cutoff: u64,
    ) -> Result<Self> {
        let schema = LabelSchema {
            classes,
            implication_edges,
            rare_cutoff,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Checks class uniqueness, edge endpoints, and that the edges form a DAG.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CoreError::Config("label schema has no classes".into()));
        }
        let mut seen = HashSet::new();
        for class in &self.classes {
            if class.trim().is_empty() {
                return Err(CoreError::Config("empty class name in schema".into()));
            }
            if !seen.insert(class.as_str()) {
                return Err(CoreError::Config(format!("duplicate class `{class}` in schema")));
            }
        }
        for (child, parent) in &self.implication_edges {
            for end in [child, parent] {
                if !seen.contains(end.as_str()) {
                    return Err(CoreError::Config(format!(
                        "implication edge references unknown class `{end}`"
                    )));
                }
            }
            if child == parent {
                return Err(CoreError::Config(format!("self-implication on `{child}`")));
            }
        }
        // Kahn's algorithm; anything left over sits on a cycle.
        let n = self.classes.len();
        let mut indegree = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (child, parent) in &self.implication_edges {
            let (c, p) = (self.index_of(child).unwrap(), self.index_of(parent).unwrap());
            out[c].push(p);
            indegree[p] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut visited = 0;
        while let Some(node) = queue.pop() {
            visited += 1;
            for &next in &out[node] {
                indegree[next] -= 1;
                if indegree[next] == 0 {
                    queue.push(next);
                }
            }
        }
        if visited != n {
            return Err(CoreError::Config("implication edges contain a cycle".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Resolves a loosely written class name ("Any Opioids", "any-opioids").
    pub fn lookup(&self, name: &str) -> Option<usize> {
        let key = canonical_class_name(name);
        self.index_of(&key)
    }

    /// Implication edges as index pairs.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        self.implication_edges
            .iter()
            .filter_map(|(c, p)| Some((self.index_of(c)?, self.index_of(p)?)))
            .collect()
    }

    /// Stable content hash, used to pair trained artifacts with their schema.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn class_positions(&self) -> HashMap<&str, usize> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect()
    }
}

/// Lowercase, trim, and join words with underscores.
pub fn canonical_class_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Binary vector aligned to a [`LabelSchema`]'s class order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(CoreError::Validation(format!(
                "label entries must be 0 or 1, found {bad}"
            )));
        }
        Ok(LabelVector(bits))
    }

    pub fn zeros(len: usize) -> Self {
        LabelVector(vec![0; len])
    }

    /// Vector with the named classes set. Unknown names are an error.
    pub fn from_classes(schema: &LabelSchema, names: &[&str]) -> Result<Self> {
        let mut bits = vec![0; schema.len()];
        for name in names {
            let idx = schema
                .lookup(name)
                .ok_or_else(|| CoreError::Validation(format!("unknown class `{name}`")))?;
            bits[idx] = 1;
        }
        Ok(LabelVector(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, idx: usize) -> bool {
        self.0[idx] == 1
    }

    pub fn set(&mut self, idx: usize, on: bool) {
        self.0[idx] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    /// Names of the positive classes, in schema order.
    pub fn positive_classes<'s>(&self, schema: &'s LabelSchema) -> Vec<&'s str> {
        self.0
            .iter()
            .zip(&schema.classes)
            .filter(|(b, _)| **b == 1)
            .map(|(_, c)| c.as_str())
            .collect()
    }
}

/// Stacks label vectors into an `N x L` matrix.
pub fn label_matrix(rows: &[LabelVector], width: usize) -> Result<Array2<u8>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(CoreError::Shape(format!(
                "label row {i} has {} entries, expected {width}",
                row.len()
            )));
        }
        for (j, &b) in row.bits().iter().enumerate() {
            out[[i, j]] = b;
        }
    }
    Ok(out)
}

/// Splits a label matrix back into per-row vectors.
pub fn matrix_rows(matrix: &Array2<u8>) -> Vec<LabelVector> {
    matrix
        .rows()
        .into_iter()
        .map(|r| LabelVector(r.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_valid() {
        let schema = LabelSchema::default();
        schema.validate().unwrap();
        assert_eq!(schema.len(), 10);
        assert_eq!(schema.classes[0], "any_opioids");
        assert_eq!(schema.classes[9], "any_drugs");
        assert_eq!(schema.rare_cutoff, 1000);
        // three opioid edges + nine any_drugs edges
        assert_eq!(schema.implication_edges.len(), 12);
    }

    #[test]
    fn cycle_is_rejected() {
        let err = LabelSchema::new(
            vec!["a".into(), "b".into()],
            vec![("a".into(), "b".into()), ("b".into(), "a".into())],
            10,
        )
        .unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn unknown_edge_endpoint_is_rejected() {
        assert!(LabelSchema::new(vec!["a".into()], vec![("a".into(), "z".into())], 1).is_err());
    }

    #[test]
    fn lookup_is_forgiving() {
        let schema = LabelSchema::default();
        assert_eq!(schema.lookup("Any Opioids"), Some(0));
        assert_eq!(schema.lookup("prescription-opioids"), Some(3));
        assert_eq!(schema.lookup("crack"), None);
    }

    #[test]
    fn label_vector_rejects_non_binary() {
        assert!(LabelVector::new(vec![0, 2]).is_err());
        let v = LabelVector::from_classes(&LabelSchema::default(), &["fentanyl", "cocaine"]).unwrap();
        assert_eq!(v.count_ones(), 2);
        assert!(v.get(2) && v.get(5));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = LabelSchema::default();
        let mut b = a.clone();
        b.rare_cutoff = 999;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), LabelSchema::default().hash());
    }
}

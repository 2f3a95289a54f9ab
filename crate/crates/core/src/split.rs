//! Deterministic train/validation/test partitions.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::labels::LabeledCase;
use crate::schema::LabelSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// 80% train / 20% test, stratified on one class. No validation set.
    #[serde(rename = "stratified_80_20")]
    Stratified8020,
    /// 60% train / 20% validation / 20% test, unstratified.
    #[serde(rename = "random_60_20_20")]
    Random602020,
}

/// Partition of case keys. Serialized as the split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub strategy: SplitStrategy,
    pub seed: u64,
    #[serde(default)]
    pub target_class: Option<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Hash of the sorted test keys. Two reports evaluated on the same test
    /// partition share this value.
    pub fn test_fingerprint(&self) -> String {
        let mut keys = self.test.clone();
        keys.sort();
        let mut hasher = Sha256::new();
        for k in &keys {
            hasher.update(k.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions of each partition's cases within `cases`.
    pub fn indices(&self, cases: &[LabeledCase]) -> Result<SplitIndices> {
        let position: std::collections::HashMap<String, usize> =
            cases.iter().enumerate().map(|(i, c)| (c.key(), i)).collect();
        let lookup = |keys: &[String]| -> Result<Vec<usize>> {
            keys.iter()
                .map(|k| {
                    position.get(k).copied().ok_or_else(|| {
                        CoreError::Split(format!("split references unknown case `{k}`"))
                    })
                })
                .collect()
        };
        Ok(SplitIndices {
            train: lookup(&self.train)?,
            validation: lookup(&self.validation)?,
            test: lookup(&self.test)?,
        })
    }

    /// Checks disjointness. Exhaustiveness is checked against `cases` when given.
    pub fn verify(&self, cases: Option<&[LabeledCase]>) -> Result<()> {
        let mut seen = HashSet::new();
        for key in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(key.as_str()) {
                return Err(CoreError::Split(format!("case `{key}` appears in two partitions")));
            }
        }
        if let Some(cases) = cases {
            if cases.len() != seen.len() || cases.iter().any(|c| !seen.contains(c.key().as_str())) {
                return Err(CoreError::Split("split does not cover the case set".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let split: DatasetSplit = serde_json::from_str(&text)?;
        split.verify(None)?;
        Ok(split)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `cases` by `strategy`.
///
/// `stratified_80_20` needs a target class with at least two positives;
/// `random_60_20_20` rejects one.
pub fn make_splits(
    cases: &[LabeledCase],
    schema: &LabelSchema,
    strategy: SplitStrategy,
    seed: u64,
    target_class: Option<&str>,
) -> Result<DatasetSplit> {
    let keys: Vec<String> = cases.iter().map(LabeledCase::key).collect();
    let target = match (strategy, target_class) {
        (SplitStrategy::Stratified8020, None) => {
            return Err(CoreError::Split("stratified_80_20 requires a target class".into()))
        }
        (SplitStrategy::Random602020, Some(c)) => {
            return Err(CoreError::Split(format!(
                "random_60_20_20 cannot stratify (target class `{c}` given)"
            )))
        }
        (SplitStrategy::Stratified8020, Some(c)) => {
            let idx = schema
                .lookup(c)
                .ok_or_else(|| CoreError::Split(format!("unknown target class `{c}`")))?;
            Some(cases.iter().map(|case| case.gold.bits()[idx]).collect::<Vec<u8>>())
        }
        (SplitStrategy::Random602020, None) => None,
    };
    let mut split = split_keys(&keys, target.as_deref(), strategy, seed)?;
    split.target_class = target_class.map(|c| schema.classes[schema.lookup(c).unwrap()].clone());
    Ok(split)
}

/// Core of [`make_splits`] over bare keys and an optional 0/1 target.
pub fn split_keys(
    keys: &[String],
    target: Option<&[u8]>,
    strategy: SplitStrategy,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        strategy,
        seed,
        target_class: None,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    match strategy {
        SplitStrategy::Random602020 => {
            let mut order: Vec<usize> = (0..keys.len()).collect();
            order.shuffle(&mut rng);
            let n = keys.len() as f64;
            let n_train = (0.6 * n).round() as usize;
            let n_val = ((0.2 * n).round() as usize).min(keys.len() - n_train);
            for (pos, &i) in order.iter().enumerate() {
                let bucket = if pos < n_train {
                    &mut split.train
                } else if pos < n_train + n_val {
                    &mut split.validation
                } else {
                    &mut split.test
                };
                bucket.push(keys[i].clone());
            }
        }
        SplitStrategy::Stratified8020 => {
            let target = target
                .ok_or_else(|| CoreError::Split("stratified_80_20 requires a target".into()))?;
            if target.len() != keys.len() {
                return Err(CoreError::Shape("target length differs from key count".into()));
            }
            let positives: Vec<usize> = (0..keys.len()).filter(|&i| target[i] == 1).collect();
            let negatives: Vec<usize> = (0..keys.len()).filter(|&i| target[i] != 1).collect();
            if positives.len() < 2 {
                return Err(CoreError::Split(format!(
                    "cannot stratify: target has {} positive case(s), need at least 2",
                    positives.len()
                )));
            }
            if negatives.len() < 2 {
                return Err(CoreError::Split(format!(
                    "cannot stratify: target has {} negative case(s), need at least 2",
                    negatives.len()
                )));
            }
            let mut test = Vec::new();
            let mut train = Vec::new();
            for mut stratum in [positives, negatives] {
                stratum.shuffle(&mut rng);
                let n_test = (0.2 * stratum.len() as f64).round() as usize;
                test.extend_from_slice(&stratum[..n_test]);
                train.extend_from_slice(&stratum[n_test..]);
            }
            // Restore input order inside each partition.
            train.sort_unstable();
            test.sort_unstable();
            split.train = train.into_iter().map(|i| keys[i].clone()).collect();
            split.test = test.into_iter().map(|i| keys[i].clone()).collect();
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn random_sizes_follow_rounding() {
        let s = split_keys(&keys(35_433), None, SplitStrategy::Random602020, 7).unwrap();
        assert_eq!(s.train.len(), 21_260);
        assert_eq!(s.validation.len(), 7_087);
        assert_eq!(s.test.len(), 7_086);
        s.verify(None).unwrap();
    }

    #[test]
    fn stratified_preserves_prevalence() {
        let target: Vec<u8> = (0..100).map(|i| u8::from(i % 10 == 0)).collect();
        let ks = keys(100);
        let s = split_keys(&ks, Some(&target), SplitStrategy::Stratified8020, 3).unwrap();
        let pos_test = s
            .test
            .iter()
            .filter(|k| target[k[1..].parse::<usize>().unwrap()] == 1)
            .count();
        assert_eq!(pos_test, 2);
        assert_eq!(s.test.len(), 20);
        assert!(s.validation.is_empty());
    }

    #[test]
    fn too_few_positives() {
        let target: Vec<u8> = (0..50).map(|i| u8::from(i == 0)).collect();
        assert!(split_keys(&keys(50), Some(&target), SplitStrategy::Stratified8020, 1).is_err());
    }

    #[test]
    fn strategy_target_preconditions() {
        let schema = LabelSchema::default();
        assert!(make_splits(&[], &schema, SplitStrategy::Stratified8020, 1, None).is_err());
        assert!(make_splits(&[], &schema, SplitStrategy::Random602020, 1, Some("fentanyl")).is_err());
    }

    #[test]
    fn deterministic() {
        let a = split_keys(&keys(500), None, SplitStrategy::Random602020, 11).unwrap();
        let b = split_keys(&keys(500), None, SplitStrategy::Random602020, 11).unwrap();
        assert_eq!(a, b);
        let c = split_keys(&keys(500), None, SplitStrategy::Random602020, 12).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let s = split_keys(&keys(20), None, SplitStrategy::Random602020, 5).unwrap();
        s.save(&path).unwrap();
        assert_eq!(DatasetSplit::load(&path).unwrap(), s);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(json["strategy"], "random_60_20_20");
    }

    proptest! {
        #[test]
        fn disjoint_and_exhaustive(n in 0usize..400, seed in any::<u64>(), stratify in any::<bool>(), rate in 0.05f64..0.95) {
            let ks = keys(n);
            let target: Vec<u8> = (0..n).map(|i| u8::from((i as f64 * rate).fract() < rate)).collect();
            let result = if stratify {
                split_keys(&ks, Some(&target), SplitStrategy::Stratified8020, seed)
            } else {
                split_keys(&ks, None, SplitStrategy::Random602020, seed)
            };
            if let Ok(s) = result {
                s.verify(None).unwrap();
                prop_assert_eq!(s.len(), n);
                let nominal_test = 0.2 * n as f64;
                prop_assert!((s.test.len() as f64 - nominal_test).abs() <= 1.0);
                if stratify {
                    let pos = target.iter().filter(|&&b| b == 1).count() as f64;
                    let pos_test = s.test.iter().filter(|k| target[k[1..].parse::<usize>().unwrap()] == 1).count() as f64;
                    prop_assert!((pos_test - 0.2 * pos).abs() <= 0.5 + 1e-9);
                }
            }
        }
    }
}

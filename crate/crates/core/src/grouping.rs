//! Folding rare substances into the `others` class.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::schema::{canonical_class_name, LabelSchema, OTHERS_CLASS};

/// Maps each substance to a schema class.
///
/// Substances counted strictly below `schema.rare_cutoff` go to `others`;
/// the rest must have a class of their own.
pub fn apply_rare_grouping(
    substance_counts: &BTreeMap<String, u64>,
    schema: &LabelSchema,
) -> Result<BTreeMap<String, String>> {
    if schema.index_of(OTHERS_CLASS).is_none() {
        return Err(CoreError::Config(format!(
            "schema has no `{OTHERS_CLASS}` class to group rare substances into"
        )));
    }
    let mut mapping = BTreeMap::new();
    let mut unmapped = Vec::new();
    for (name, &count) in substance_counts {
        if count < schema.rare_cutoff {
            mapping.insert(name.clone(), OTHERS_CLASS.to_string());
            continue;
        }
        match schema.lookup(name) {
            Some(idx) => {
                mapping.insert(name.clone(), schema.classes[idx].clone());
            }
            None => unmapped.push(format!("{name} ({count})")),
        }
    }
    if !unmapped.is_empty() {
        return Err(CoreError::Config(format!(
            "substances at or above the cutoff of {} have no schema class: {}",
            schema.rare_cutoff,
            unmapped.join(", ")
        )));
    }
    Ok(mapping)
}

/// Canonical substance key, shared with schema lookups.
pub fn substance_key(name: &str) -> String {
    canonical_class_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(items: &[(&str, u64)]) -> BTreeMap<String, u64> {
        items.iter().map(|(n, c)| (n.to_string(), *c)).collect()
    }

    #[test]
    fn rare_substances_become_others() {
        let schema = LabelSchema::default();
        let m = apply_rare_grouping(
            &counts(&[("barbiturates", 40), ("fentanyl", 4758), ("hallucinogens", 12)]),
            &schema,
        )
        .unwrap();
        assert_eq!(m["barbiturates"], "others");
        assert_eq!(m["hallucinogens"], "others");
        assert_eq!(m["fentanyl"], "fentanyl");
    }

    #[test]
    fn cutoff_is_strict() {
        let schema = LabelSchema::default();
        let m = apply_rare_grouping(&counts(&[("cocaine", 1000), ("heroin", 999)]), &schema).unwrap();
        assert_eq!(m["cocaine"], "cocaine");
        assert_eq!(m["heroin"], "others");
    }

    #[test]
    fn frequent_unknown_substance_is_config_error() {
        let schema = LabelSchema::default();
        let err = apply_rare_grouping(&counts(&[("xylazine", 5000), ("kratom", 2000)]), &schema)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("xylazine") && msg.contains("kratom"));
    }

    #[test]
    fn loose_names_resolve() {
        let schema = LabelSchema::default();
        let m = apply_rare_grouping(&counts(&[("Prescription Opioids", 1197)]), &schema).unwrap();
        assert_eq!(m["Prescription Opioids"], "prescription_opioids");
    }

    proptest! {
        #[test]
        fn frequent_never_others(count in 1000u64..100_000, idx in 0usize..10) {
            let schema = LabelSchema::default();
            let name = schema.classes[idx].clone();
            let m = apply_rare_grouping(&counts(&[(name.as_str(), count)]), &schema).unwrap();
            prop_assert_eq!(&m[&name], &name);
        }
    }
}

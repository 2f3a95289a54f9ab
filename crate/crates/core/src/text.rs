//! Text normalization: lowercasing, tokenization and stop-word removal.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_STOP_LIST_VERSION: &str = "en-v1";

/// English stop words (the common NLTK list).
const ENGLISH_STOP_WORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've",
    "you'll", "you'd", "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself",
    "she", "she's", "her", "hers", "herself", "it", "it's", "its", "itself", "they", "them",
    "their", "theirs", "themselves", "what", "which", "who", "whom", "this", "that", "that'll",
    "these", "those", "am", "is", "are", "was", "were", "be", "been", "being", "have", "has",
    "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or",
    "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against",
    "between", "into", "through", "during", "before", "after", "above", "below", "to", "from",
    "up", "down", "in", "out", "on", "off", "over", "under", "again", "further", "then", "once",
    "here", "there", "when", "where", "why", "how", "all", "any", "both", "each", "few", "more",
    "most", "other", "some", "such", "no", "nor", "not", "only", "own", "same", "so", "than",
    "too", "very", "s", "t", "can", "will", "just", "don", "don't", "should", "should've", "now",
    "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn", "couldn't", "didn",
    "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't", "isn",
    "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan",
    "shan't", "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't",
    "wouldn", "wouldn't",
];

/// Substance vocabulary that is never stripped, even if a custom stop list names it.
const PROTECTED_DRUG_TERMS: &[&str] = &[
    "alcohol", "ethanol", "alprazolam", "amphetamine", "benzodiazepine", "benzodiazepines",
    "buprenorphine", "cocaine", "cocaethylene", "codeine", "diazepam", "ecstasy", "fentanyl",
    "flualprazolam", "gabapentin", "heroin", "hydrocodone", "hydromorphone", "ketamine",
    "mdma", "meth", "methadone", "methamphetamine", "morphine", "opiate", "opiates", "opioid",
    "opioids", "oxycodone", "oxymorphone", "tramadol", "xylazine", "clonazepam", "lorazepam",
    "barbiturates", "kratom", "mitragynine", "isotonitazene", "pcp", "thc",
];

/// A versioned stop-word list plus the drug names it must never remove.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopList {
    pub version: String,
    pub words: BTreeSet<String>,
    pub protected: BTreeSet<String>,
}

impl Default for StopList {
    fn default() -> Self {
        StopList {
            version: DEFAULT_STOP_LIST_VERSION.to_string(),
            words: ENGLISH_STOP_WORDS.iter().map(|w| w.to_string()).collect(),
            protected: PROTECTED_DRUG_TERMS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl StopList {
    pub fn empty() -> Self {
        StopList {
            version: "empty".into(),
            words: BTreeSet::new(),
            protected: BTreeSet::new(),
        }
    }

    pub fn from_words<I, S>(version: &str, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StopList {
            version: version.to_string(),
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
            protected: PROTECTED_DRUG_TERMS.iter().map(|w| w.to_string()).collect(),
        }
    }

    /// One word per line; blank lines and `#` comments skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let words: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        let version = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(StopList::from_words(&version, words))
    }

    pub fn removes(&self, token: &str) -> bool {
        self.words.contains(token) && !self.protected.contains(token)
    }

    pub fn as_set(&self) -> HashSet<&str> {
        self.words.iter().map(String::as_str).collect()
    }
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '-' | '\'' | '.' | ',' | '/')
}

fn is_edge_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Lowercased tokens with leading/trailing punctuation trimmed.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split(|c: char| !is_token_char(c))
        .map(|t| t.trim_matches(is_edge_punct))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lowercases, tokenizes, drops stop words, and rejoins with single spaces.
///
/// Idempotent: the output tokenizes back to itself.
pub fn normalize_text(raw: &str, stop_list: &StopList) -> String {
    tokenize(raw)
        .into_iter()
        .filter(|t| !stop_list.removes(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn drops_stop_words_and_lowercases() {
        let stop = StopList::default();
        assert_eq!(
            normalize_text("Acute Fentanyl AND Cocaine Toxicity", &stop),
            "acute fentanyl cocaine toxicity"
        );
    }

    #[test]
    fn empty_input() {
        assert_eq!(normalize_text("", &StopList::default()), "");
        assert_eq!(normalize_text("   \t ", &StopList::default()), "");
    }

    #[test]
    fn punctuation_handling() {
        let stop = StopList::default();
        assert_eq!(
            normalize_text("Combined effects of fentanyl, heroin; and 3,4-MDMA.", &stop),
            "combined effects fentanyl heroin 3,4-mdma"
        );
        // the stray "s" is itself a stop word
        assert_eq!(normalize_text("(DRUG(S) TOXICITY)", &stop), "drug toxicity");
    }

    #[test]
    fn protected_terms_survive_custom_lists() {
        let stop = StopList::from_words("t", ["fentanyl", "acute"]);
        assert_eq!(normalize_text("Acute fentanyl", &stop), "fentanyl");
    }

    #[test]
    fn default_list_never_hits_drug_names() {
        let stop = StopList::default();
        for term in PROTECTED_DRUG_TERMS {
            assert!(!stop.words.contains(*term), "{term} is a stop word");
        }
    }

    proptest! {
        #[test]
        fn idempotent(raw in "[ -~]{0,80}") {
            let stop = StopList::default();
            let once = normalize_text(&raw, &stop);
            prop_assert_eq!(normalize_text(&once, &stop), once.clone());
            prop_assert_eq!(once.to_lowercase(), once);
        }
    }
}

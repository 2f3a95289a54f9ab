//! Generated keyword-triggered corpora for tests and demos.
//!
//! Each drug class has a few trigger words; a case is positive for a class
//! exactly when its text contains one of that class's triggers, with
//! `any_opioids` and `any_drugs` derived from the base classes. The matching
//! vector table gives every class a reserved coordinate, so mean-pooled
//! documents are separable by construction.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr_lite::standard_normal;

use crate::embed::{CuiLexicon, VectorTable, DEFAULT_SEMANTIC_FILTER};
use crate::error::{CoreError, Result};
use crate::labels::{write_gold_labels, LabeledCase};
use crate::record::DeathRecord;
use crate::schema::{LabelSchema, LabelVector};
use crate::text::{normalize_text, StopList};

/// Trigger words per base class.
pub const TRIGGERS: &[(&str, &[&str])] = &[
    ("heroin", &["heroin", "diacetylmorphine"]),
    ("fentanyl", &["fentanyl", "acetylfentanyl"]),
    ("prescription_opioids", &["oxycodone", "hydrocodone", "methadone"]),
    ("methamphetamine", &["methamphetamine"]),
    ("cocaine", &["cocaine"]),
    ("benzodiazepines", &["alprazolam", "diazepam", "clonazepam"]),
    ("alcohol", &["ethanol", "alcohol"]),
    ("others", &["gabapentin", "diphenhydramine", "barbiturates"]),
];

const OPIOID_CLASSES: [&str; 3] = ["heroin", "fentanyl", "prescription_opioids"];

const FILLER: &[&str] = &[
    "hypertensive cardiovascular disease",
    "atherosclerotic coronary artery disease",
    "blunt force injuries",
    "gunshot wound of head",
    "complications of pneumonia",
    "chronic obstructive pulmonary disease",
    "sepsis",
    "end stage renal disease",
    "diabetes mellitus",
    "asphyxia",
    "drowning",
    "obesity",
];

const JURISDICTIONS: &[&str] = &["cook", "los_angeles", "san_diego", "tarrant"];

mod rand_distr_lite {
    use rand::Rng;

    /// Box-Muller standard normal draw.
    pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Probability that a case mentions any drug.
    pub drug_rate: f64,
    /// Maximum number of distinct drug classes in one case.
    pub max_drugs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 2000,
            drug_rate: 0.55,
            max_drugs: 3,
            seed: 17,
        }
    }
}

/// Every word the generator can emit.
pub fn vocabulary() -> Vec<String> {
    let mut words: Vec<String> = TRIGGERS
        .iter()
        .flat_map(|(_, ws)| ws.iter().map(|w| w.to_string()))
        .collect();
    for phrase in FILLER {
        words.extend(phrase.split_whitespace().map(str::to_string));
    }
    words.extend(
        ["acute", "combined", "toxicity", "intoxication", "effects", "of", "and", "mixed", "drug", "overdose"]
            .iter()
            .map(|w| w.to_string()),
    );
    words.sort();
    words.dedup();
    words
}

fn labels_for(schema: &LabelSchema, classes: &[&str]) -> Result<LabelVector> {
    let mut names: Vec<&str> = classes.to_vec();
    if classes.iter().any(|c| OPIOID_CLASSES.contains(c)) && schema.index_of("any_opioids").is_some() {
        names.push("any_opioids");
    }
    if !classes.is_empty() && schema.index_of("any_drugs").is_some() {
        names.push("any_drugs");
    }
    LabelVector::from_classes(schema, &names)
}

/// Generates labeled cases over the default schema.
pub fn generate_cases(config: &SynthConfig, stop_list: &StopList) -> Result<Vec<LabeledCase>> {
    let schema = LabelSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cases = Vec::with_capacity(config.n_cases);
    for i in 0..config.n_cases {
        let mut classes: Vec<&str> = Vec::new();
        let primary;
        let mut secondary = String::new();
        if rng.random_bool(config.drug_rate) {
            let k = rng.random_range(1..=config.max_drugs.max(1));
            let mut pool: Vec<&(&str, &[&str])> = TRIGGERS.iter().collect();
            pool.shuffle(&mut rng);
            let words: Vec<&str> = pool[..k]
                .iter()
                .map(|(class, triggers)| {
                    classes.push(class);
                    *triggers.choose(&mut rng).unwrap()
                })
                .collect();
            let list = match words.len() {
                1 => words[0].to_string(),
                _ => format!("{} and {}", words[..words.len() - 1].join(", "), words[words.len() - 1]),
            };
            primary = match rng.random_range(0..3) {
                0 => format!("acute {list} toxicity"),
                1 => format!("combined effects of {list}"),
                _ => format!("{list} intoxication"),
            };
            if rng.random_bool(0.3) {
                secondary = FILLER.choose(&mut rng).unwrap().to_string();
            }
        } else {
            primary = FILLER.choose(&mut rng).unwrap().to_string();
            if rng.random_bool(0.4) {
                secondary = FILLER.choose(&mut rng).unwrap().to_string();
            }
        }
        let mut record = DeathRecord::with_causes(&format!("s{i:05}"), &primary, &secondary);
        record.jurisdiction = JURISDICTIONS[i % JURISDICTIONS.len()].to_string();
        record.manner_of_death = if classes.is_empty() { "natural" } else { "accident" }.into();
        record.age = Some(rng.random_range(18..90));
        let gold = labels_for(&schema, &classes)?;
        let normalized_text = normalize_text(&record.combined_text(), stop_list);
        cases.push(LabeledCase {
            record,
            normalized_text,
            gold,
        });
    }
    Ok(cases)
}

/// Column reserved for each base class in the synthetic tables.
fn class_axis(class: &str) -> usize {
    TRIGGERS.iter().position(|(c, _)| *c == class).unwrap()
}

fn synthetic_row<R: Rng>(rng: &mut R, dim: usize, class: Option<&str>, noise: f64) -> Vec<f32> {
    let axes = TRIGGERS.len() + 1;
    assert!(dim > axes, "synthetic tables need more than {axes} dimensions");
    let mut v: Vec<f32> = (0..dim)
        .map(|d| {
            let scale = if d < axes { noise * 0.2 } else { noise };
            (standard_normal(rng) * scale) as f32
        })
        .collect();
    if let Some(class) = class {
        v[class_axis(class)] += 1.0;
        if OPIOID_CLASSES.contains(&class) {
            v[TRIGGERS.len()] += 1.0;
        }
    }
    v
}

/// Word-vector table covering [`vocabulary`].
pub fn synthetic_word_vectors(dim: usize, seed: u64) -> VectorTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = VectorTable::new(dim);
    for word in vocabulary() {
        let class = TRIGGERS
            .iter()
            .find(|(_, ws)| ws.contains(&word.as_str()))
            .map(|(c, _)| *c);
        let row = synthetic_row(&mut rng, dim, class, 0.3);
        table.insert(&word, &row).unwrap();
    }
    table
}

/// Concept dictionary for trigger words plus a few non-chemical findings,
/// and a vector table keyed by its identifiers.
pub fn synthetic_concepts(dim: usize, seed: u64) -> (CuiLexicon, VectorTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lexicon = CuiLexicon::new();
    let mut table = VectorTable::new(dim);
    let mut id = 1000;
    for (class, words) in TRIGGERS {
        for w in *words {
            let cui = format!("C{id:07}");
            id += 1;
            lexicon.insert(w, &cui, DEFAULT_SEMANTIC_FILTER);
            table.insert(&cui, &synthetic_row(&mut rng, dim, Some(class), 0.3)).unwrap();
        }
    }
    for finding in ["toxicity", "intoxication", "overdose", "sepsis", "asphyxia"] {
        let cui = format!("C{id:07}");
        id += 1;
        lexicon.insert(finding, &cui, "finding");
        table.insert(&cui, &synthetic_row(&mut rng, dim, None, 0.3)).unwrap();
    }
    (lexicon, table)
}

/// Writes `records.csv` and `gold.csv` for `cases` into `dir`.
pub fn write_dataset(dir: &Path, cases: &[LabeledCase]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let path = dir.join("records.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CoreError::Ingest(e.to_string()))?;
    let csv_err = |e: csv::Error| CoreError::Ingest(e.to_string());
    w.write_record([
        "case_id",
        "jurisdiction",
        "age",
        "gender",
        "race",
        "date_of_death",
        "manner_of_death",
        "primary_cause",
        "secondary_cause",
    ])
    .map_err(csv_err)?;
    for c in cases {
        let r = &c.record;
        w.write_record([
            r.case_id.as_str(),
            r.jurisdiction.as_str(),
            &r.age.map(|a| a.to_string()).unwrap_or_default(),
            r.gender.as_str(),
            r.race.as_str(),
            &r.date_of_death.map(|d| d.to_string()).unwrap_or_default(),
            r.manner_of_death.as_str(),
            r.primary_cause.as_str(),
            r.secondary_cause.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CoreError::io(&path, e))?;
    write_gold_labels(&dir.join("gold.csv"), &LabelSchema::default(), cases)
}

//! k-shot prompt construction from a validation-split exemplar pool.

use std::collections::HashSet;

use codtox_core::{LabelSchema, LabeledCase};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{render_answer, ANSWER_FORMAT};
use crate::error::{LlmError, Result};

pub const SUPPORTED_SHOTS: [usize; 4] = [0, 3, 5, 10];
pub const EXAMPLE_DELIMITER: &str = "### Example";
pub const CASE_DELIMITER: &str = "### Case";

pub const DEFAULT_TEMPLATE: &str = "You classify medical examiner cause-of-death statements. \
Decide which of the following substance classes contributed to the death: {classes}.\n{answer_format}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSpec {
    /// Instruction with `{classes}` and `{answer_format}` slots.
    pub template: String,
    pub k: usize,
    pub exemplar_seed: u64,
    /// Round-robin over positive classes instead of uniform sampling.
    pub balanced: bool,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            template: DEFAULT_TEMPLATE.to_string(),
            k: 0,
            exemplar_seed: 0,
            balanced: false,
            max_tokens: 64,
            temperature: 0.0,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SHOTS.contains(&self.k) {
            return Err(LlmError::Config(format!("k={} not in {SUPPORTED_SHOTS:?}", self.k)));
        }
        if !self.template.contains("{answer_format}") {
            return Err(LlmError::Config("template lacks an {answer_format} slot".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }

    pub fn instruction(&self, schema: &LabelSchema) -> String {
        self.template
            .replace("{classes}", &schema.classes.join(", "))
            .replace("{answer_format}", ANSWER_FORMAT)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub case_id: String,
    pub text: String,
    pub answer: String,
    /// Positive class indices, used by balanced sampling.
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPool {
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarPool {
    /// Pool from validation cases with answers in the canonical format.
    pub fn from_cases(cases: &[LabeledCase], schema: &LabelSchema) -> Self {
        let exemplars = cases
            .iter()
            .map(|c| Exemplar {
                case_id: c.key(),
                text: c.normalized_text.clone(),
                answer: render_answer(&c.gold, schema),
                positives: (0..c.gold.len()).filter(|&j| c.gold.get(j)).collect(),
            })
            .collect();
        ExemplarPool { exemplars }
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.exemplars.iter().map(|e| e.case_id.as_str()).collect()
    }

    /// Errors if any of `test_ids` is also an exemplar.
    pub fn check_disjoint<'a>(&self, test_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let ids = self.ids();
        let shared: Vec<&str> = test_ids.into_iter().filter(|id| ids.contains(id)).collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(LlmError::Config(format!(
                "{} test cases appear in the exemplar pool, e.g. {}",
                shared.len(),
                shared[0]
            )))
        }
    }

    /// Seeded order over the pool, identical for every query in a run.
    fn order(&self, spec: &PromptSpec) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.exemplar_seed));
        if !spec.balanced {
            return idx;
        }
        // bucket by first positive class (negatives last), then deal round-robin
        let width = self.exemplars.iter().flat_map(|e| e.positives.iter().copied()).max().map_or(0, |m| m + 1);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); width + 1];
        for i in idx {
            let b = self.exemplars[i].positives.first().copied().unwrap_or(width);
            buckets[b].push(i);
        }
        let mut out = Vec::with_capacity(self.len());
        let mut round = 0;
        while out.len() < self.len() {
            for b in &buckets {
                if let Some(&i) = b.get(round) {
                    out.push(i);
                }
            }
            round += 1;
        }
        out
    }

    /// The `k` exemplars for one query, never including `exclude`.
    pub fn select(&self, spec: &PromptSpec, exclude: Option<&str>) -> Result<Vec<&Exemplar>> {
        if self.len() < spec.k {
            return Err(LlmError::Config(format!(
                "exemplar pool has {} cases, prompt needs {}",
                self.len(),
                spec.k
            )));
        }
        let picked: Vec<&Exemplar> = self
            .order(spec)
            .into_iter()
            .map(|i| &self.exemplars[i])
            .filter(|e| Some(e.case_id.as_str()) != exclude)
            .take(spec.k)
            .collect();
        if picked.len() < spec.k {
            return Err(LlmError::Config(format!(
                "exemplar pool has only {} cases besides the query",
                picked.len()
            )));
        }
        Ok(picked)
    }
}

/// Instruction, `k` exemplar blocks, then the query block ending in `Answer:`.
pub fn build_prompt(
    case_id: Option<&str>,
    case_text: &str,
    spec: &PromptSpec,
    pool: &ExemplarPool,
    schema: &LabelSchema,
) -> Result<String> {
    spec.validate()?;
    let mut out = spec.instruction(schema);
    out.push_str("\n\n");
    for e in pool.select(spec, case_id)? {
        out.push_str(&format!("{EXAMPLE_DELIMITER}\nText: {}\nAnswer: {}\n\n", one_line(&e.text), e.answer));
    }
    out.push_str(&format!("{CASE_DELIMITER}\nText: {}\nAnswer:", one_line(case_text)));
    Ok(out)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Text of the query block of a prompt built by [`build_prompt`].
pub fn query_text(prompt: &str) -> Option<&str> {
    let tail = &prompt[prompt.rfind(CASE_DELIMITER)? + CASE_DELIMITER.len()..];
    let tail = tail.trim_start().strip_prefix("Text: ")?;
    tail.strip_suffix("\nAnswer:")
}

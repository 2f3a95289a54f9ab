//! Integrated-gradients token attribution and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};
use crate::model::EncoderClassifier;
use crate::tape::{Mat, Tape};

pub const DEFAULT_STEPS: usize = 50;
pub const MIN_STEPS: usize = 8;
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub case_id: Option<String>,
    /// WordPiece tokens without `[CLS]`/`[SEP]`; `##` marks a continuation.
    pub tokens: Vec<String>,
    /// Signed contribution of each token to the target logit.
    pub scores: Vec<f64>,
    pub target_class: String,
    pub probability: f64,
    pub logit: f64,
    pub baseline_logit: f64,
    pub baseline: String,
    pub steps: usize,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// `Σ scores − (F(x) − F(baseline))`.
    pub fn completeness_gap(&self) -> f64 {
        self.total() - (self.logit - self.baseline_logit)
    }
}

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out.reverse();
    out
}

/// Attributes the `target_class` logit to input tokens by integrating
/// gradients from a `[CLS] [PAD]… [SEP]` baseline of equal length.
pub fn attribute_tokens(model: &EncoderClassifier, text: &str, target_class: &str, steps: usize) -> Result<AttributionMap> {
    let target = model
        .schema
        .index_of(target_class)
        .ok_or_else(|| EncoderError::Config(format!("unknown class {target_class:?}")))?;
    if steps < MIN_STEPS {
        return Err(EncoderError::Config(format!("{steps} integration steps is below the minimum of {MIN_STEPS}")));
    }
    let tok = &model.tokenizer;
    let enc = tok.encode(text, model.max_length);
    let seq = enc.ids.len();
    let mut base_ids = vec![tok.pad_id(); seq];
    base_ids[0] = tok.cls_id();
    base_ids[seq - 1] = tok.sep_id();
    let x = model.bert.embedding_rows(&enc.ids);
    let base = model.bert.embedding_rows(&base_ids);
    let diff = &x - &base;
    let hidden = x.ncols();

    let nodes = gauss_legendre(steps);
    let mut acc = Mat::zeros((seq, hidden));
    for chunk in nodes.chunks(CHUNK) {
        let b = chunk.len();
        let mut input = Mat::zeros((b * seq, hidden));
        for (k, &(alpha, _)) in chunk.iter().enumerate() {
            let rows = &base + &(&diff * alpha as f32);
            input.slice_mut(ndarray::s![k * seq..(k + 1) * seq, ..]).assign(&rows);
        }
        let mut tape = Tape::new(&model.bert.params);
        tape.track_params = false;
        let words = tape.input(input, true);
        let h = model.bert.encode(&mut tape, words, b, seq, &vec![true; b * seq]);
        let logits = model.bert.classify(&mut tape, h, b, seq);
        let mut seed = Mat::zeros((b, model.num_labels()));
        for (k, &(_, w)) in chunk.iter().enumerate() {
            seed[[k, target]] = w as f32;
        }
        let grads = tape.backward_from(logits, seed);
        let g = grads.input(words).expect("input requires grad");
        for k in 0..b {
            acc += &g.slice(ndarray::s![k * seq..(k + 1) * seq, ..]);
        }
    }

    let scores: Vec<f64> = (1..seq - 1)
        .map(|r| {
            diff.row(r)
                .iter()
                .zip(acc.row(r))
                .map(|(&d, &g)| f64::from(d) * f64::from(g))
                .sum()
        })
        .collect();
    let logit = f64::from(model.bert.logits_from_embeddings(x)[[0, target]]);
    let baseline_logit = f64::from(model.bert.logits_from_embeddings(base)[[0, target]]);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EncoderError::Training("non-finite attribution".into()));
    }
    Ok(AttributionMap {
        case_id: None,
        tokens: enc.tokens[1..seq - 1].to_vec(),
        scores,
        target_class: target_class.to_string(),
        probability: 1.0 / (1.0 + (-logit).exp()),
        logit,
        baseline_logit,
        baseline: "[CLS] [PAD]... [SEP] word embeddings, equal length".into(),
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Html,
    Text,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Green for positive, red for negative; opacity is `|score| / max |score|`
/// within each map.
pub fn render_attribution_report(maps: &[AttributionMap], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            for m in maps {
                let _ = writeln!(
                    out,
                    "# case={} class={} probability={:.4} logit={:.4} baseline_logit={:.4}",
                    m.case_id.as_deref().unwrap_or("-"),
                    m.target_class,
                    m.probability,
                    m.logit,
                    m.baseline_logit
                );
                for (t, s) in m.tokens.iter().zip(&m.scores) {
                    let _ = writeln!(out, "{t}\t{s:+.6}");
                }
                out.push('\n');
            }
        }
        ReportFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token attributions</title></head><body>\n");
            for m in maps {
                let max = m.scores.iter().fold(0.0f64, |a, s| a.max(s.abs()));
                let _ = write!(
                    out,
                    "<section class=\"attribution\"><h2>{} &middot; {} (p={:.3})</h2><p>",
                    escape(m.case_id.as_deref().unwrap_or("")),
                    escape(&m.target_class),
                    m.probability
                );
                for (t, &s) in m.tokens.iter().zip(&m.scores) {
                    let alpha = if max > 0.0 { s.abs() / max } else { 0.0 };
                    let (class, rgb) = if s >= 0.0 { ("pos", "0, 160, 0") } else { ("neg", "200, 0, 0") };
                    let _ = write!(
                        out,
                        "<span class=\"{class}\" data-score=\"{s:.6}\" style=\"background-color: rgba({rgb}, {alpha:.3})\">{}</span> ",
                        escape(t)
                    );
                }
                out.push_str("</p></section>\n");
            }
            out.push_str("</body></html>\n");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_is_exact_for_polynomials() {
        for n in [1, 2, 8, 50] {
            let q = gauss_legendre(n);
            assert_eq!(q.len(), n);
            assert!((q.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
            // exact up to degree 2n-1
            let deg = (2 * n - 1).min(20) as i32;
            let got: f64 = q.iter().map(|(t, w)| w * t.powi(deg)).sum();
            assert!((got - 1.0 / (deg as f64 + 1.0)).abs() < 1e-12, "n={n}");
            assert!(q.iter().all(|(t, _)| *t > 0.0 && *t < 1.0));
        }
    }

    fn map(tokens: &[&str], scores: &[f64]) -> AttributionMap {
        AttributionMap {
            case_id: Some("c1".into()),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            scores: scores.to_vec(),
            target_class: "benzodiazepines".into(),
            probability: 0.58,
            logit: 0.3228,
            baseline_logit: 0.0,
            baseline: String::new(),
            steps: 50,
        }
    }

    #[test]
    fn empty_report_is_valid() {
        let html = render_attribution_report(&[], ReportFormat::Html);
        assert!(html.starts_with("<!DOCTYPE html>") && html.trim_end().ends_with("</html>"));
        assert!(!html.contains("<span"));
        assert!(render_attribution_report(&[], ReportFormat::Text).is_empty());
    }

    #[test]
    fn single_positive_token_is_saturated_green() {
        let html = render_attribution_report(&[map(&["alprazolam"], &[1.0])], ReportFormat::Html);
        assert_eq!(html.matches("<span").count(), 1);
        assert!(html.contains("rgba(0, 160, 0, 1.000)"));
    }

    #[test]
    fn mixed_signs_partition_and_order() {
        let m = map(&["alpra", "##zolam", "<b>", "ethanol"], &[0.8, 0.2, -0.4, -0.1]);
        let html = render_attribution_report(&[m.clone()], ReportFormat::Html);
        let spans: Vec<&str> = html.split("<span ").skip(1).collect();
        let alpha = |s: &str| -> f64 {
            let i = s.find("rgba(").unwrap();
            let inner = &s[i + 5..s[i..].find(')').unwrap() + i];
            inner.rsplit(", ").next().unwrap().parse().unwrap()
        };
        for (s, &score) in spans.iter().zip(&m.scores) {
            assert_eq!(s.contains("0, 160, 0"), score > 0.0);
            assert_eq!(s.contains("200, 0, 0"), score < 0.0);
        }
        let mut by_abs: Vec<usize> = (0..4).collect();
        by_abs.sort_by(|&a, &b| m.scores[b].abs().total_cmp(&m.scores[a].abs()));
        for w in by_abs.windows(2) {
            assert!(alpha(spans[w[0]]) >= alpha(spans[w[1]]));
        }
        assert!(html.contains("&lt;b&gt;"));
        assert!(html.contains("##zolam"));
        let text = render_attribution_report(&[m], ReportFormat::Text);
        assert!(text.contains("alpra\t+0.800000"));
        assert!(text.contains("ethanol\t-0.100000"));
    }
}

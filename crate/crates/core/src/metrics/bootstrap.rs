use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Resamples on which the metric was undefined; excluded from the interval.
    pub n_degenerate: usize,
}

impl ConfidenceInterval {
    /// An interval collapsed onto the point value (no resampling).
    pub fn point_only(point: f64) -> Self {
        ConfidenceInterval {
            point,
            low: point,
            high: point,
            level: 0.0,
            n_bootstrap: 0,
            seed: 0,
            n_degenerate: 0,
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.low <= value && value <= self.high
    }
}

/// Case indices of resample `b`: `n` uniform draws with replacement from a
/// ChaCha8 stream keyed by `(seed, b)`. Independent of evaluation order.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Linear-interpolated quantile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over cases.
///
/// `metric` receives the row indices of one resample (or of the full data for
/// the point estimate) and returns `None` when undefined on that sample.
/// Resamples run in parallel but each draws from its own counter-keyed
/// stream, so the interval is identical to a serial run.
pub fn bootstrap_ci<F>(n_cases: usize, metric: F, config: &BootstrapConfig) -> Result<ConfidenceInterval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n_cases == 0 {
        return Err(CoreError::Validation("bootstrap needs a non-empty dataset".into()));
    }
    if config.n_resamples == 0 {
        return Err(CoreError::Config("bootstrap needs at least one resample".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(CoreError::Config(format!("confidence level {} not in (0,1)", config.level)));
    }
    let all: Vec<usize> = (0..n_cases).collect();
    let point = metric(&all).ok_or_else(|| {
        CoreError::Validation("metric is undefined on the full dataset".into())
    })?;
    let samples: Vec<Option<f64>> = (0..config.n_resamples)
        .into_par_iter()
        .map(|b| metric(&resample_indices(n_cases, config.seed, b)))
        .collect();
    let mut values: Vec<f64> = samples.iter().flatten().copied().collect();
    let n_degenerate = samples.len() - values.len();
    if values.is_empty() {
        return Err(CoreError::Validation("metric undefined on every resample".into()));
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.level) / 2.0;
    Ok(ConfidenceInterval {
        point,
        low: percentile(&values, alpha),
        high: percentile(&values, 1.0 - alpha),
        level: config.level,
        n_bootstrap: config.n_resamples,
        seed: config.seed,
        n_degenerate,
    })
}

//! Feature checks, standardization and class weights.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ClassicError, Result};

/// Rejects non-finite features, naming the first bad row.
pub fn check_features(x: ArrayView2<f64>) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(ClassicError::Validation(format!(
                "row {i} has a non-finite value in column {j}"
            )));
        }
    }
    Ok(())
}

pub fn check_binary(y: &[u8]) -> Result<(usize, usize)> {
    if let Some(i) = y.iter().position(|&v| v > 1) {
        return Err(ClassicError::Validation(format!("label at row {i} is {}, not 0/1", y[i])));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    Ok((pos, y.len() - pos))
}

/// Balanced weights n / (2 n_c): inverse class frequency with mean 1 over samples.
pub fn balanced_weights(y: &[u8]) -> Result<Vec<f64>> {
    let (pos, neg) = check_binary(y)?;
    if pos == 0 || neg == 0 {
        return Err(ClassicError::Training(format!(
            "labels are single-valued ({pos} positive, {neg} negative)"
        )));
    }
    let n = y.len() as f64;
    let wp = n / (2.0 * pos as f64);
    let wn = n / (2.0 * neg as f64);
    Ok(y.iter().map(|&v| if v == 1 { wp } else { wn }).collect())
}

/// Per-column standardization. Constant columns get unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Array1<f64> = x.sum_axis(Axis(0)) / n;
        let scale = x
            .columns()
            .into_iter()
            .zip(mean.iter())
            .map(|(col, &m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Scaler {
            mean: mean.to_vec(),
            scale,
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

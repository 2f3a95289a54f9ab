//! L2-regularized, sample-weighted logistic regression.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::lbfgs::{minimize, LbfgsOptions};
use crate::prep::{sigmoid, softplus, Scaler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub scaler: Scaler,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub converged: bool,
}

impl LogisticModel {
    /// Minimizes ½‖β‖² + C Σ wᵢ ℓᵢ on standardized features; the intercept is
    /// not penalized.
    pub fn fit(x: ArrayView2<f64>, y: &[u8], w: &[f64], c: f64, max_iter: usize) -> Self {
        let scaler = Scaler::fit(x);
        let xs = scaler.transform(x);
        let (n, d) = xs.dim();
        let mut z = vec![0.0; n];
        let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
            let (beta, b) = theta.split_at(d);
            for (i, row) in xs.rows().into_iter().enumerate() {
                z[i] = b[0] + row.iter().zip(beta).map(|(a, c)| a * c).sum::<f64>();
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for (i, row) in xs.rows().into_iter().enumerate() {
                let yi = f64::from(y[i]);
                loss += w[i] * (softplus(z[i]) - yi * z[i]);
                let r = c * w[i] * (sigmoid(z[i]) - yi);
                for (g, a) in grad[..d].iter_mut().zip(row) {
                    *g += r * a;
                }
                grad[d] += r;
            }
            let mut reg = 0.0;
            for j in 0..d {
                reg += beta[j] * beta[j];
                grad[j] += beta[j];
            }
            0.5 * reg + c * loss
        };
        let r = minimize(
            objective,
            vec![0.0; d + 1],
            &LbfgsOptions {
                max_iter,
                gtol: 1e-5,
                ..Default::default()
            },
        );
        let intercept = r.x[d];
        let mut coef = r.x;
        coef.truncate(d);
        LogisticModel {
            scaler,
            coef,
            intercept,
            converged: r.converged,
        }
    }

    pub fn decision(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let xs = self.scaler.transform(x);
        xs.rows()
            .into_iter()
            .map(|row| self.intercept + row.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.decision(x).into_iter().map(sigmoid).collect()
    }
}

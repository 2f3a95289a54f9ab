//! Kernel support-vector classifier: SMO with second-order working-set
//! selection, per-sample box constraints, and Platt-scaled probabilities.

use std::collections::VecDeque;
use std::rc::Rc;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::prep::Scaler;

const TAU: f64 = 1e-12;
const KERNEL_CACHE_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match *self {
            Kernel::Linear => a.dot(&b),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

struct KernelRows<'a> {
    x: &'a Array2<f64>,
    kernel: Kernel,
    rows: Vec<Option<Rc<Vec<f64>>>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a Array2<f64>, kernel: Kernel) -> Self {
        let n = x.nrows();
        let capacity = (KERNEL_CACHE_BYTES / (8 * n.max(1))).clamp(2, n.max(2));
        KernelRows {
            x,
            kernel,
            rows: vec![None; n],
            order: VecDeque::new(),
            capacity,
        }
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        if let Some(r) = &self.rows[i] {
            return r.clone();
        }
        if self.order.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.rows[old] = None;
            }
        }
        let xi = self.x.row(i);
        let r: Rc<Vec<f64>> = Rc::new(
            self.x
                .rows()
                .into_iter()
                .map(|xj| self.kernel.eval(xi, xj))
                .collect(),
        );
        self.rows[i] = Some(r.clone());
        self.order.push_back(i);
        r
    }
}

/// Solution of the SVC dual.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub gradient: Vec<f64>,
}

/// Solves min ½αᵀQα − eᵀα s.t. 0 ≤ αᵢ ≤ Cᵢ, yᵀα = 0 with Q = yᵢyⱼK(xᵢ,xⱼ).
pub fn solve_dual(x: &Array2<f64>, y: &[f64], c: &[f64], kernel: Kernel, eps: f64) -> DualSolution {
    let n = x.nrows();
    let mut k = KernelRows::new(x, kernel);
    let qd: Vec<f64> = (0..n).map(|i| kernel.eval(x.row(i), x.row(i))).collect();
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let max_iter = (100 * n).max(10_000_000);
    let is_upper = |a: f64, ci: f64| a >= ci;
    let is_lower = |a: f64| a <= 0.0;
    let mut iter = 0;
    while iter < max_iter {
        // i: maximal violating index in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            let v = -y[t] * g[t];
            let in_up = if y[t] > 0.0 { !is_upper(alpha[t], c[t]) } else { !is_lower(alpha[t]) };
            if in_up && v >= gmax {
                gmax = v;
                i_sel = t;
            }
        }
        if i_sel == usize::MAX {
            break;
        }
        let i = i_sel;
        let ki = k.row(i);
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 { !is_lower(alpha[t]) } else { !is_upper(alpha[t], c[t]) };
            if !in_low {
                continue;
            }
            let v = y[t] * g[t];
            if v >= gmax2 {
                gmax2 = v;
            }
            let grad_diff = gmax + v;
            if grad_diff > 0.0 {
                let quad = qd[i] + qd[t] - 2.0 * ki[t];
                let obj = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= obj_min {
                    obj_min = obj;
                    j_sel = t;
                }
            }
        }
        if gmax + gmax2 < eps || j_sel == usize::MAX {
            break;
        }
        let j = j_sel;
        let kj = k.row(j);
        iter += 1;

        let (ci, cj) = (c[i], c[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * ki[j];
        if y[i] != y[j] {
            let mut quad = qd[i] + qd[j] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let mut quad = qd[i] + qd[j] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        for t in 0..n {
            g[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    // rho: mean of y·G over free vectors, else midpoint of the feasible range.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * g[t];
        if alpha[t] >= c[t] {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    DualSolution {
        alpha,
        rho,
        iterations: iter,
        gradient: g,
    }
}

/// Sigmoid fit p = 1 / (1 + exp(A·f + B)) by Newton's method with backtracking.
pub fn platt_fit(dec: &[f64], y: &[u8]) -> (f64, f64) {
    let prior1 = y.iter().filter(|&&v| v == 1).count() as f64;
    let prior0 = y.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = y.iter().map(|&v| if v == 1 { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        dec.iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&f, &ti) in dec.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            break;
        }
    }
    (a, b)
}

pub fn platt_probability(dec: f64, a: f64, b: f64) -> f64 {
    let z = dec * a + b;
    if z >= 0.0 {
        (-z).exp() / (1.0 + (-z).exp())
    } else {
        1.0 / (1.0 + z.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvcModel {
    pub scaler: Scaler,
    pub kernel: Kernel,
    /// Support vectors (standardized) and their coefficients αᵢyᵢ.
    pub support: Vec<Vec<f64>>,
    pub dual_coef: Vec<f64>,
    pub rho: f64,
    pub platt_a: f64,
    pub platt_b: f64,
}

/// Kernel parameter: "linear" or "rbf"; gamma `None` means 1 / n_features.
pub fn make_kernel(kind: &str, gamma: Option<f64>, n_features: usize) -> Option<Kernel> {
    match kind {
        "linear" => Some(Kernel::Linear),
        "rbf" => Some(Kernel::Rbf {
            gamma: gamma.unwrap_or(1.0 / n_features.max(1) as f64),
        }),
        _ => None,
    }
}

impl SvcModel {
    /// Per-sample box bound is `c · w[i]`.
    pub fn fit(x: ArrayView2<f64>, y: &[u8], w: &[f64], c: f64, kernel: Kernel) -> Self {
        let scaler = Scaler::fit(x);
        let xs = scaler.transform(x);
        let ys: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
        let cs: Vec<f64> = w.iter().map(|wi| c * wi).collect();
        let sol = solve_dual(&xs, &ys, &cs, kernel, 1e-3);
        let mut support = Vec::new();
        let mut dual_coef = Vec::new();
        for i in 0..xs.nrows() {
            if sol.alpha[i] > 0.0 {
                support.push(xs.row(i).to_vec());
                dual_coef.push(sol.alpha[i] * ys[i]);
            }
        }
        let mut model = SvcModel {
            scaler,
            kernel,
            support,
            dual_coef,
            rho: sol.rho,
            platt_a: -1.0,
            platt_b: 0.0,
        };
        let dec = model.decision_scaled(&xs);
        let (a, b) = platt_fit(&dec, y);
        model.platt_a = a;
        model.platt_b = b;
        model
    }

    fn decision_scaled(&self, xs: &Array2<f64>) -> Vec<f64> {
        xs.rows()
            .into_iter()
            .map(|row| {
                let mut s = -self.rho;
                for (sv, coef) in self.support.iter().zip(&self.dual_coef) {
                    s += coef * self.kernel.eval(ArrayView1::from(sv.as_slice()), row);
                }
                s
            })
            .collect()
    }

    pub fn decision(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.decision_scaled(&self.scaler.transform(x))
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.decision(x)
            .into_iter()
            .map(|d| platt_probability(d, self.platt_a, self.platt_b))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kkt_violation(x: &Array2<f64>, y: &[f64], c: &[f64], k: Kernel, sol: &DualSolution) -> f64 {
        // Recompute the gradient from scratch rather than trusting the solver's.
        let n = x.nrows();
        let mut worst: f64 = 0.0;
        let eq: f64 = sol.alpha.iter().zip(y).map(|(a, yi)| a * yi).sum();
        worst = worst.max(eq.abs());
        for i in 0..n {
            let gi: f64 = (0..n)
                .map(|j| y[i] * y[j] * k.eval(x.row(i), x.row(j)) * sol.alpha[j])
                .sum::<f64>()
                - 1.0;
            // yᵢf(xᵢ) - 1 with f = Σ αⱼyⱼK - rho.
            let m = gi - y[i] * sol.rho;
            let a = sol.alpha[i];
            let v = if a <= 0.0 {
                (-m).max(0.0)
            } else if a >= c[i] {
                m.max(0.0)
            } else {
                m.abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    #[test]
    fn hard_margin_two_points() {
        let x = array![[0.0], [2.0]];
        let sol = solve_dual(&x, &[-1.0, 1.0], &[1e6, 1e6], Kernel::Linear, 1e-9);
        // w = Σ αᵢyᵢxᵢ = 1, rho = 1 so f(x) = x - 1.
        let w: f64 = sol.alpha[1] * 2.0;
        assert!((w - 1.0).abs() < 1e-9);
        assert!((sol.rho - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kkt_conditions_hold_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let n = 60;
            let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
            let y: Vec<f64> = (0..n)
                .map(|i| if x[[i, 0]] + 0.5 * x[[i, 1]] + 0.3 * (rng.random::<f64>() - 0.5) > 0.0 { 1.0 } else { -1.0 })
                .collect();
            let c: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 2.0 } else { 0.7 }).collect();
            let k = if trial % 2 == 0 { Kernel::Linear } else { Kernel::Rbf { gamma: 0.8 } };
            let sol = solve_dual(&x, &y, &c, k, 1e-6);
            for (a, ci) in sol.alpha.iter().zip(&c) {
                assert!(*a >= -1e-12 && *a <= ci + 1e-12);
            }
            let v = kkt_violation(&x, &y, &c, k, &sol);
            assert!(v < 1e-4, "trial {trial}: KKT violation {v}");
        }
    }

    #[test]
    fn platt_is_monotone_and_centered() {
        let dec: Vec<f64> = (-10..=10).map(|v| v as f64 / 5.0).collect();
        let y: Vec<u8> = dec.iter().map(|&d| u8::from(d > 0.0)).collect();
        let (a, b) = platt_fit(&dec, &y);
        assert!(a < 0.0);
        let p: Vec<f64> = dec.iter().map(|&d| platt_probability(d, a, b)).collect();
        assert!(p.windows(2).all(|w| w[0] <= w[1]));
        assert!(p[0] < 0.2 && p[20] > 0.8);
    }

    #[test]
    fn rbf_learns_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 4.0 - 2.0);
        let y: Vec<u8> = x.rows().into_iter().map(|r| u8::from(r[0] * r[0] + r[1] * r[1] < 1.5)).collect();
        let m = SvcModel::fit(x.view(), &y, &vec![1.0; n], 10.0, Kernel::Rbf { gamma: 1.0 });
        let p = m.predict_proba(x.view());
        let acc = p.iter().zip(&y).filter(|(p, &y)| (**p >= 0.5) == (y == 1)).count() as f64 / n as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }
}

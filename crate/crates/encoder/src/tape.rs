//! Reverse-mode autodiff over row-major `f32` matrices.
//!
//! Parameters live in a [`ParamStore`] and are referenced by id, never copied
//! onto the tape. Only the ops a BERT-style encoder needs are provided.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named parameter matrices. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`; returns its id.
    pub fn insert(&mut self, name: &str, value: Mat) -> usize {
        if let Some(&id) = self.index.get(name) {
            self.values[id] = value;
            return id;
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

enum Op {
    Input,
    Linear { x: Var, w: usize, b: Option<usize> },
    Add(Var, Var),
    Gather { table: usize, ids: Vec<usize> },
    LayerNorm { x: Var, g: usize, b: usize, xhat: Mat, rstd: Vec<f32> },
    Gelu(Var),
    Tanh(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<Mat> },
    SelectRows { x: Var, rows: Vec<usize> },
    BceWithLogits { logits: Var, targets: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    /// When false, parameter gradients are never accumulated.
    pub track_params: bool,
}

/// Result of a backward pass.
pub struct Gradients {
    /// Indexed by parameter id; `None` where no gradient flowed.
    pub params: Vec<Option<Mat>>,
    inputs: HashMap<usize, Mat>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Mat> {
        self.inputs.get(&v.0)
    }
}

fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = f64::from(x);
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + x * pdf) as f32
}

const MASKED: f32 = -1e9;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            track_params: true,
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// A constant, or a leaf whose gradient is reported when `requires_grad`.
    pub fn input(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    /// `x Wᵀ + b`, with `W` stored `out x in` and `b` as `1 x out`.
    pub fn linear(&mut self, x: Var, w: usize, b: Option<usize>) -> Var {
        let wm = self.params.value(w);
        let mut y = self.value(x).dot(&wm.t());
        if let Some(b) = b {
            y += &self.params.value(b).row(0);
        }
        let ng = self.needs(x) || self.track_params;
        self.push(y, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// Rows of a parameter table.
    pub fn gather(&mut self, table: usize, ids: &[usize]) -> Var {
        let t = self.params.value(table);
        let mut y = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            y.row_mut(r).assign(&t.row(id));
        }
        let ng = self.track_params;
        self.push(y, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, g: usize, b: usize, eps: f32) -> Var {
        let xv = self.value(x);
        let (n, h) = xv.dim();
        let mut xhat = Mat::zeros((n, h));
        let mut rstd = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / h as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / h as f32;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
        }
        let gamma = self.params.value(g).row(0);
        let beta = self.params.value(b).row(0);
        let y = &xhat * &gamma + &beta;
        let ng = self.needs(x) || self.track_params;
        self.push(y, Op::LayerNorm { x, g, b, xhat, rstd }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu);
        let ng = self.needs(x);
        self.push(y, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(f32::tanh);
        let ng = self.needs(x);
        self.push(y, Op::Tanh(x), ng)
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq` laid out as consecutive row blocks. `key_valid[r]` masks
    /// padded key positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, key_valid: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.ncols();
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = Mat::zeros((batch * seq, hidden));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut sc = qh.dot(&kh.t()) * scale;
                for (j, mut col) in sc.axis_iter_mut(Axis(1)).enumerate() {
                    if !key_valid[b * seq + j] {
                        col.fill(MASKED);
                    }
                }
                for mut row in sc.rows_mut() {
                    let m = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&sc.dot(&vh));
                probs.push(sc);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, batch, seq, heads, probs }, ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let y = self.value(x).select(Axis(0), rows);
        let ng = self.needs(x);
        self.push(y, Op::SelectRows { x, rows: rows.to_vec() }, ng)
    }

    /// Mean element-wise binary cross-entropy on logits; a `1 x 1` result.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Mat) -> Var {
        let z = self.value(logits);
        let n = z.len().max(1) as f32;
        let total: f32 = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| {
                let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                sp - y * z
            })
            .sum();
        let ng = self.needs(logits);
        self.push(Mat::from_elem((1, 1), total / n), Op::BceWithLogits { logits, targets: targets.clone() }, ng)
    }

    /// Backpropagates `seed` (same shape as `root`'s value).
    pub fn backward_from(&self, root: Var, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let track = self.track_params;
        fn acc(slot: &mut Option<Mat>, g: Mat) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g),
            }
        }
        fn acc_param(slots: &mut [Option<Mat>], id: usize, shape: (usize, usize), f: impl FnOnce(&mut Mat)) {
            let slot = slots[id].get_or_insert_with(|| Mat::zeros(shape));
            f(slot);
        }
        let mut inputs = HashMap::new();
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    inputs.insert(idx, dy);
                }
                Op::Linear { x, w, b } => {
                    let wm = self.params.value(*w);
                    if track {
                        let xv = self.value(*x);
                        acc_param(&mut pgrads, *w, wm.dim(), |g| *g += &dy.t().dot(xv));
                        if let Some(b) = b {
                            let sum = dy.sum_axis(Axis(0));
                            acc_param(&mut pgrads, *b, (1, sum.len()), |g| {
                                let mut r = g.row_mut(0);
                                r += &sum;
                            });
                        }
                    }
                    if self.needs(*x) {
                        acc(&mut grads[x.0], dy.dot(wm));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads[a.0], dy.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads[b.0], dy);
                    }
                }
                Op::Gather { table, ids } => {
                    if track {
                        let shape = self.params.value(*table).dim();
                        acc_param(&mut pgrads, *table, shape, |g| {
                            for (r, &id) in ids.iter().enumerate() {
                                let mut row = g.row_mut(id);
                                row += &dy.row(r);
                            }
                        });
                    }
                }
                Op::LayerNorm { x, g, b, xhat, rstd } => {
                    let gamma = self.params.value(*g).row(0);
                    if track {
                        let dg = (&dy * xhat).sum_axis(Axis(0));
                        let db = dy.sum_axis(Axis(0));
                        acc_param(&mut pgrads, *g, (1, dg.len()), |m| {
                            let mut r = m.row_mut(0);
                            r += &dg;
                        });
                        acc_param(&mut pgrads, *b, (1, db.len()), |m| {
                            let mut r = m.row_mut(0);
                            r += &db;
                        });
                    }
                    if self.needs(*x) {
                        let h = xhat.ncols() as f32;
                        let dxhat = &dy * &gamma;
                        let mut dx = Mat::zeros(dy.dim());
                        for i in 0..dy.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let m1 = dr.sum() / h;
                            let m2 = dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / h;
                            for ((o, &d), &xh) in dx.row_mut(i).iter_mut().zip(dr).zip(xr) {
                                *o = rstd[i] * (d - m1 - xh * m2);
                            }
                        }
                        acc(&mut grads[x.0], dx);
                    }
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &dy;
                    acc(&mut grads[x.0], dx);
                }
                Op::Tanh(x) => {
                    let mut dx = node.value.mapv(|y| 1.0 - y * y);
                    dx *= &dy;
                    acc(&mut grads[x.0], dx);
                }
                Op::Attention { q, k, v, batch, seq, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let hidden = qv.ncols();
                    let dh = hidden / heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    let mut dv = Mat::zeros(vv.dim());
                    for bi in 0..*batch {
                        let rows = bi * seq..(bi + 1) * seq;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[bi * heads + h];
                            let d_o = dy.slice(s![rows.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&d_o));
                            let dp = d_o.dot(&vh.t());
                            let mut ds = Mat::zeros(p.dim());
                            for i in 0..p.nrows() {
                                let dot: f32 = dp.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum();
                                for ((o, &pi), &dpi) in ds.row_mut(i).iter_mut().zip(p.row(i)).zip(dp.row(i)) {
                                    *o = pi * (dpi - dot) * scale;
                                }
                            }
                            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
                        }
                    }
                    if self.needs(*q) {
                        acc(&mut grads[q.0], dq);
                    }
                    if self.needs(*k) {
                        acc(&mut grads[k.0], dk);
                    }
                    if self.needs(*v) {
                        acc(&mut grads[v.0], dv);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &dy.row(r);
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let n = z.len().max(1) as f32;
                    let scale = dy[[0, 0]] / n;
                    let dz = ndarray::Zip::from(z)
                        .and(targets)
                        .map_collect(|&z, &y| (1.0 / (1.0 + (-z).exp()) - y) * scale);
                    acc(&mut grads[logits.0], dz);
                }
            }
        }
        Gradients { params: pgrads, inputs }
    }

    /// Backward from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_from(loss, Mat::ones((1, 1)))
    }
}

//! Histogram decision trees over quantile-binned features.
//!
//! One builder serves both ensembles; a [`Criterion`] supplies the per-sample
//! statistics, split gain and leaf values.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_BINS: usize = 64;

/// Per-feature bin edges. A value `v` falls in bin `#{e : e < v}`, so a split
/// after bin `b` sends `v <= edges[b]` left.
#[derive(Debug, Clone, PartialEq)]
pub struct Binner {
    pub edges: Vec<Vec<f64>>,
}

pub struct BinnedMatrix {
    pub n: usize,
    /// Column-major bin codes.
    pub codes: Vec<u8>,
}

impl BinnedMatrix {
    #[inline]
    fn code(&self, feature: usize, row: usize) -> u8 {
        self.codes[feature * self.n + row]
    }
}

impl Binner {
    pub fn fit(x: ArrayView2<f64>, max_bins: usize) -> Self {
        let max_bins = max_bins.clamp(2, 256);
        let edges = x
            .columns()
            .into_iter()
            .map(|col| {
                let mut v: Vec<f64> = col.to_vec();
                v.sort_by(f64::total_cmp);
                v.dedup();
                if v.len() <= max_bins {
                    v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
                } else {
                    let mut e: Vec<f64> = (1..max_bins)
                        .map(|q| {
                            let pos = q * (v.len() - 1) / max_bins;
                            0.5 * (v[pos] + v[pos + 1])
                        })
                        .collect();
                    e.dedup();
                    e
                }
            })
            .collect();
        Binner { edges }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> BinnedMatrix {
        let n = x.nrows();
        let mut codes = vec![0u8; n * self.edges.len()];
        for (f, edges) in self.edges.iter().enumerate() {
            for (i, &v) in x.column(f).iter().enumerate() {
                codes[f * n + i] = edges.partition_point(|&e| e < v) as u8;
            }
        }
        BinnedMatrix { n, codes }
    }

    fn n_bins(&self, feature: usize) -> usize {
        self.edges[feature].len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(&self, row: ArrayView1<f64>) -> &[f64] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold { *left } else { *right } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Split rule. Statistics are `width()` additive numbers per sample.
pub trait Criterion {
    fn width(&self) -> usize;
    fn gain(&self, parent: &[f64], left: &[f64], right: &[f64]) -> f64;
    fn child_ok(&self, stats: &[f64]) -> bool;
    fn leaf(&self, stats: &[f64]) -> Vec<f64>;
    fn is_pure(&self, _stats: &[f64]) -> bool {
        false
    }
}

/// Weighted Gini over outputs; stats are (positive weight, total weight) per output.
pub struct Gini;

fn gini_mass(stats: &[f64]) -> f64 {
    stats
        .chunks_exact(2)
        .map(|s| if s[1] > 0.0 { 2.0 * s[0] * (s[1] - s[0]) / s[1] } else { 0.0 })
        .sum()
}

impl Criterion for Gini {
    fn width(&self) -> usize {
        2
    }
    fn gain(&self, parent: &[f64], left: &[f64], right: &[f64]) -> f64 {
        gini_mass(parent) - gini_mass(left) - gini_mass(right)
    }
    fn child_ok(&self, _stats: &[f64]) -> bool {
        true
    }
    fn leaf(&self, stats: &[f64]) -> Vec<f64> {
        stats
            .chunks_exact(2)
            // subtracted histograms can leave stats a few ulps outside range
            .map(|s| if s[1] > 0.0 { (s[0] / s[1]).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }
    fn is_pure(&self, stats: &[f64]) -> bool {
        stats
            .chunks_exact(2)
            .all(|s| s[0] <= 1e-12 * s[1] || s[1] - s[0] <= 1e-12 * s[1])
    }
}

/// Second-order boosting gain; stats are (gradient, hessian) per output.
pub struct Newton {
    pub lambda: f64,
    pub min_child_weight: f64,
    pub learning_rate: f64,
}

fn newton_score(stats: &[f64], lambda: f64) -> f64 {
    stats.chunks_exact(2).map(|s| s[0] * s[0] / (s[1] + lambda)).sum()
}

impl Criterion for Newton {
    fn width(&self) -> usize {
        2
    }
    fn gain(&self, parent: &[f64], left: &[f64], right: &[f64]) -> f64 {
        0.5 * (newton_score(left, self.lambda) + newton_score(right, self.lambda)
            - newton_score(parent, self.lambda))
    }
    fn child_ok(&self, stats: &[f64]) -> bool {
        let k = stats.len() / 2;
        let h: f64 = stats.chunks_exact(2).map(|s| s[1]).sum();
        h / k as f64 >= self.min_child_weight
    }
    fn leaf(&self, stats: &[f64]) -> Vec<f64> {
        stats
            .chunks_exact(2)
            .map(|s| -self.learning_rate * s[0] / (s[1] + self.lambda))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    /// 0 means unlimited.
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features sampled at each node; `None` uses all.
    pub max_features: Option<usize>,
}

struct Work {
    node: usize,
    rows: Vec<u32>,
    depth: usize,
    stats: Vec<f64>,
}

/// Grows one tree on `rows` (repeats allowed, e.g. bootstrap draws).
/// `stats` is row-major with `width · outputs` numbers per sample.
pub fn build_tree<C: Criterion, R: Rng>(
    crit: &C,
    binner: &Binner,
    binned: &BinnedMatrix,
    stats: &[f64],
    stride: usize,
    rows: Vec<u32>,
    params: &TreeParams,
    rng: &mut R,
) -> Tree {
    let d = binner.edges.len();
    let min_leaf = params.min_samples_leaf.max(1);
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: Vec::new() }];
    let root_stats = sum_stats(stats, stride, &rows);
    let mut stack = vec![Work {
        node: 0,
        rows,
        depth: 0,
        stats: root_stats,
    }];
    let max_bins = (0..d).map(|f| binner.n_bins(f)).max().unwrap_or(1);
    let mut hist = vec![0.0; max_bins * stride];
    let mut counts = vec![0usize; max_bins];
    let mut left = vec![0.0; stride];
    let mut right = vec![0.0; stride];

    while let Some(work) = stack.pop() {
        let n = work.rows.len();
        let depth_ok = params.max_depth == 0 || work.depth < params.max_depth;
        if !depth_ok || n < 2 * min_leaf || crit.is_pure(&work.stats) {
            nodes[work.node] = Node::Leaf { value: crit.leaf(&work.stats) };
            continue;
        }
        let features: Vec<usize> = match params.max_features {
            Some(m) if m < d => {
                let mut f = sample(rng, d, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let mut best: Option<(f64, usize, usize)> = None;
        for &f in &features {
            let nb = binner.n_bins(f);
            if nb < 2 {
                continue;
            }
            hist[..nb * stride].iter_mut().for_each(|v| *v = 0.0);
            counts[..nb].iter_mut().for_each(|c| *c = 0);
            for &r in &work.rows {
                let b = binned.code(f, r as usize) as usize;
                counts[b] += 1;
                let src = &stats[r as usize * stride..(r as usize + 1) * stride];
                for (h, s) in hist[b * stride..(b + 1) * stride].iter_mut().zip(src) {
                    *h += s;
                }
            }
            left.iter_mut().for_each(|v| *v = 0.0);
            let mut n_left = 0usize;
            for b in 0..nb - 1 {
                n_left += counts[b];
                for (l, h) in left.iter_mut().zip(&hist[b * stride..(b + 1) * stride]) {
                    *l += h;
                }
                if counts[b] == 0 && b > 0 {
                    continue;
                }
                let n_right = n - n_left;
                if n_left < min_leaf {
                    continue;
                }
                if n_right < min_leaf {
                    break;
                }
                for ((r, p), l) in right.iter_mut().zip(&work.stats).zip(&left) {
                    *r = p - l;
                }
                if !crit.child_ok(&left) || !crit.child_ok(&right) {
                    continue;
                }
                let g = crit.gain(&work.stats, &left, &right);
                if g > 1e-12 && best.is_none_or(|(bg, _, _)| g > bg) {
                    best = Some((g, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else {
            nodes[work.node] = Node::Leaf { value: crit.leaf(&work.stats) };
            continue;
        };
        let (l_rows, r_rows): (Vec<u32>, Vec<u32>) = work
            .rows
            .iter()
            .partition(|&&r| binned.code(f, r as usize) as usize <= b);
        let l_stats = sum_stats(stats, stride, &l_rows);
        let r_stats: Vec<f64> = work.stats.iter().zip(&l_stats).map(|(p, l)| p - l).collect();
        let li = nodes.len();
        nodes.push(Node::Leaf { value: Vec::new() });
        nodes.push(Node::Leaf { value: Vec::new() });
        nodes[work.node] = Node::Split {
            feature: f,
            threshold: binner.edges[f][b],
            left: li as u32,
            right: (li + 1) as u32,
        };
        stack.push(Work {
            node: li + 1,
            rows: r_rows,
            depth: work.depth + 1,
            stats: r_stats,
        });
        stack.push(Work {
            node: li,
            rows: l_rows,
            depth: work.depth + 1,
            stats: l_stats,
        });
    }
    Tree { nodes }
}

fn sum_stats(stats: &[f64], stride: usize, rows: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; stride];
    for &r in rows {
        for (o, s) in out.iter_mut().zip(&stats[r as usize * stride..(r as usize + 1) * stride]) {
            *o += s;
        }
    }
    out
}

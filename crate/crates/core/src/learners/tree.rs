//! Depth-limited CART trees grown on pre-binned features.
//!
//! Candidate thresholds are midpoints between adjacent distinct training
//! values. When a feature has more than `max_bins` distinct values the
//! candidates are thinned to rank quantiles, so the partition of training
//! rows depends only on feature ranks.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[(i, *feature)] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict_row(x, i)).collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Features mapped to small bin indices: `bin(x) = #{thresholds < x}`, so
/// `x <= thresholds[k]` exactly when `bin(x) <= k`.
pub(crate) struct BinnedFeatures {
    bins: Vec<Vec<u8>>,
    thresholds: Vec<Vec<f64>>,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

impl BinnedFeatures {
    pub fn new(x: &DMatrix<f64>, max_bins: usize) -> Self {
        let n = x.nrows();
        let mut bins = Vec::with_capacity(x.ncols());
        let mut thresholds = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mut sorted: Vec<f64> = col.iter().copied().collect();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let mut distinct: Vec<f64> = Vec::new();
            let mut cum: Vec<usize> = Vec::new();
            for (i, &v) in sorted.iter().enumerate() {
                if distinct.last() != Some(&v) {
                    distinct.push(v);
                    cum.push(i + 1);
                } else {
                    *cum.last_mut().unwrap() = i + 1;
                }
            }
            let m = distinct.len();
            let thr: Vec<f64> = if m <= max_bins {
                distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect()
            } else {
                let mut cuts: Vec<usize> = Vec::with_capacity(max_bins);
                for b in 1..max_bins {
                    let target = (b * n).div_ceil(max_bins);
                    let k = cum.partition_point(|&c| c < target);
                    if k + 1 < m && cuts.last() != Some(&k) {
                        cuts.push(k);
                    }
                }
                cuts.iter().map(|&k| midpoint(distinct[k], distinct[k + 1])).collect()
            };
            let b: Vec<u8> = col
                .iter()
                .map(|v| thr.partition_point(|t| t < v) as u8)
                .collect();
            bins.push(b);
            thresholds.push(thr);
        }
        BinnedFeatures { bins, thresholds }
    }

    pub fn n_features(&self) -> usize {
        self.bins.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Criterion {
    /// Reduction in within-node sum of squares.
    Variance,
    /// Reduction in size-weighted Gini impurity for 0/1 targets, which is
    /// exactly twice the variance reduction.
    Gini,
}

pub(crate) struct GrowConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub max_features: usize,
    pub criterion: Criterion,
}

struct Grower<'a, R: Rng, L: Fn(&[usize]) -> f64> {
    binned: &'a BinnedFeatures,
    target: &'a [f64],
    cfg: &'a GrowConfig,
    rng: &'a mut R,
    leaf_value: L,
    nodes: Vec<Node>,
    counts: Vec<u32>,
    sums: Vec<f64>,
    feature_pool: Vec<usize>,
}

/// Grows one tree on `rows` (repeats allowed, e.g. a bootstrap sample).
/// Ties in split gain go to the lowest feature index, then the lowest threshold.
pub(crate) fn grow<R: Rng, L: Fn(&[usize]) -> f64>(
    binned: &BinnedFeatures,
    target: &[f64],
    mut rows: Vec<usize>,
    cfg: &GrowConfig,
    rng: &mut R,
    leaf_value: L,
) -> Tree {
    let mut g = Grower {
        binned,
        target,
        cfg,
        rng,
        leaf_value,
        nodes: Vec::new(),
        counts: vec![0; 257],
        sums: vec![0.0; 257],
        feature_pool: (0..binned.n_features()).collect(),
    };
    g.build(&mut rows, 0);
    Tree { nodes: g.nodes }
}

impl<R: Rng, L: Fn(&[usize]) -> f64> Grower<'_, R, L> {
    fn build(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let split = if depth < self.cfg.max_depth && rows.len() >= 2 * self.cfg.min_leaf {
            self.best_split(rows)
        } else {
            None
        };
        match split {
            None => {
                self.nodes[idx] = Node::Leaf {
                    value: (self.leaf_value)(rows),
                };
            }
            Some((feature, bin)) => {
                let bins = &self.binned.bins[feature];
                let mut lo = 0;
                for k in 0..rows.len() {
                    if bins[rows[k]] as usize <= bin {
                        rows.swap(lo, k);
                        lo += 1;
                    }
                }
                let (left_rows, right_rows) = rows.split_at_mut(lo);
                let left = self.build(left_rows, depth + 1);
                let right = self.build(right_rows, depth + 1);
                self.nodes[idx] = Node::Split {
                    feature,
                    threshold: self.binned.thresholds[feature][bin],
                    left,
                    right,
                };
            }
        }
        idx
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, usize)> {
        let first = self.target[rows[0]];
        if rows.iter().all(|&r| self.target[r] == first) {
            return None;
        }
        let p = self.binned.n_features();
        let m = self.cfg.max_features.clamp(1, p.max(1));
        let candidates: Vec<usize> = if m >= p {
            (0..p).collect()
        } else {
            for k in 0..m {
                let j = self.rng.gen_range(k..p);
                self.feature_pool.swap(k, j);
            }
            let mut c = self.feature_pool[..m].to_vec();
            c.sort_unstable();
            c
        };
        let n = rows.len() as f64;
        let total: f64 = rows.iter().map(|&r| self.target[r]).sum();
        let parent = total * total / n;
        let min_leaf = self.cfg.min_leaf as u32;
        let mut best: Option<(usize, usize)> = None;
        let mut best_gain = 1e-12 * parent.abs().max(1e-300);
        for f in candidates {
            let nb = self.binned.thresholds[f].len() + 1;
            if nb < 2 {
                continue;
            }
            let bins = &self.binned.bins[f];
            self.counts[..nb].fill(0);
            self.sums[..nb].fill(0.0);
            for &r in rows {
                let b = bins[r] as usize;
                self.counts[b] += 1;
                self.sums[b] += self.target[r];
            }
            let mut n_left = 0u32;
            let mut s_left = 0.0;
            let n_all = rows.len() as u32;
            for k in 0..nb - 1 {
                n_left += self.counts[k];
                s_left += self.sums[k];
                if n_left < min_leaf {
                    continue;
                }
                let n_right = n_all - n_left;
                if n_right < min_leaf {
                    break;
                }
                if self.counts[k] == 0 {
                    continue;
                }
                let s_right = total - s_left;
                let mut gain = s_left * s_left / n_left as f64 + s_right * s_right / n_right as f64 - parent;
                if self.cfg.criterion == Criterion::Gini {
                    gain *= 2.0;
                }
                if gain > best_gain {
                    best_gain = gain;
                    best = Some((f, k));
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::offset_mean;
    use rand::SeedableRng;

    #[test]
    fn bins_respect_threshold_semantics() {
        let x = DMatrix::from_column_slice(6, 1, &[3.0, 1.0, 2.0, 2.0, 5.0, 4.0]);
        let b = BinnedFeatures::new(&x, 64);
        assert_eq!(b.thresholds[0], vec![1.5, 2.5, 3.5, 4.5]);
        for i in 0..6 {
            for (k, t) in b.thresholds[0].iter().enumerate() {
                assert_eq!(x[(i, 0)] <= *t, b.bins[0][i] as usize <= k);
            }
        }
    }

    #[test]
    fn thinned_bins_keep_threshold_semantics() {
        let vals: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 0.37).collect();
        let x = DMatrix::from_column_slice(1000, 1, &vals);
        let b = BinnedFeatures::new(&x, 16);
        assert!(b.thresholds[0].len() <= 15);
        for i in 0..1000 {
            for (k, t) in b.thresholds[0].iter().enumerate() {
                assert_eq!(x[(i, 0)] <= *t, b.bins[0][i] as usize <= k);
            }
        }
    }

    #[test]
    fn deep_tree_interpolates_distinct_rows() {
        let x = DMatrix::from_column_slice(8, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let y = [3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, 6.0];
        let binned = BinnedFeatures::new(&x, 64);
        let cfg = GrowConfig {
            max_depth: 8,
            min_leaf: 1,
            max_features: 1,
            criterion: Criterion::Variance,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let tree = grow(&binned, &y, (0..8).collect(), &cfg, &mut rng, |rows| {
            offset_mean(&rows.iter().map(|&r| y[r]).collect::<Vec<_>>())
        });
        assert_eq!(tree.predict(&x), y.to_vec());
    }
}

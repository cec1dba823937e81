//! Random forests: bootstrap-aggregated CART trees with per-split feature
//! subsampling. Classification trees hold leaf class-1 frequencies and the
//! forest returns their average as a probability.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::tree::{grow, BinnedFeatures, Criterion, GrowConfig, Tree};
use super::{FittedLearner, LearnerSpec, Model, Task};
use crate::error::Result;
use crate::numeric::{offset_mean, rng_from};

pub(super) fn max_features(spec: &LearnerSpec, task: Task, p: usize) -> usize {
    let m = match (spec.params.feature_fraction, task) {
        (Some(f), _) => (f * p as f64).ceil() as usize,
        (None, Task::Regression) => p / 3,
        (None, Task::Classification) => (p as f64).sqrt().floor() as usize,
    };
    m.clamp(1, p.max(1))
}

pub(super) fn fit(spec: &LearnerSpec, task: Task, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    let n = x.nrows();
    let p = x.ncols();
    let binned = BinnedFeatures::new(x, spec.params.max_bins);
    let cfg = GrowConfig {
        max_depth: spec.params.max_depth,
        min_leaf: spec.params.min_leaf,
        max_features: max_features(spec, task, p),
        criterion: match task {
            Task::Regression => Criterion::Variance,
            Task::Classification => Criterion::Gini,
        },
    };
    let trees: Vec<Tree> = (0..spec.params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from(spec.seed, &[0xf0, k as u64]);
            let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            grow(&binned, y, rows, &cfg, &mut rng, |rows| {
                let vals: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
                offset_mean(&vals)
            })
        })
        .collect();
    Ok(FittedLearner {
        spec: spec.clone(),
        task,
        n_features: p,
        standardization: None,
        model: Model::Forest { trees },
        degenerate: false,
        converged: true,
    })
}

pub(super) fn predict(trees: &[Tree], x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let per_tree: Vec<Vec<f64>> = trees.iter().map(|t| t.predict(x)).collect();
    let mut row = vec![0.0; trees.len()];
    (0..n)
        .map(|i| {
            for (r, t) in row.iter_mut().zip(&per_tree) {
                *r = t[i];
            }
            offset_mean(&row)
        })
        .collect()
}

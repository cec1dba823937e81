//! Gradient boosting with shallow CART trees.
//!
//! Regression boosts squared error with mean-residual leaves. Classification
//! boosts the logistic log-likelihood on the log-odds scale with one Newton
//! step per leaf.

use nalgebra::DMatrix;
use rand::seq::index::sample;

use super::tree::{grow, BinnedFeatures, Criterion, GrowConfig, Tree};
use super::{FittedLearner, LearnerSpec, Model, Task};
use crate::error::Result;
use crate::numeric::{clamp_prob, logit, offset_mean, rng_from, sigmoid};

const MAX_LEAF_STEP: f64 = 10.0;

pub(super) fn fit(spec: &LearnerSpec, task: Task, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    let n = x.nrows();
    let p = x.ncols();
    let prm = &spec.params;
    let binned = BinnedFeatures::new(x, prm.max_bins);
    let cfg = GrowConfig {
        max_depth: prm.max_depth,
        min_leaf: prm.min_leaf,
        max_features: prm
            .feature_fraction
            .map(|f| ((f * p as f64).ceil() as usize).max(1))
            .unwrap_or(p),
        criterion: Criterion::Variance,
    };
    let init = match task {
        Task::Regression => offset_mean(y),
        Task::Classification => logit(clamp_prob(y.iter().sum::<f64>() / n as f64)),
    };
    let mut score = vec![init; n];
    let mut resid = vec![0.0; n];
    let mut hess = vec![1.0; n];
    let m = ((prm.subsample * n as f64).ceil() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(prm.n_trees);
    for round in 0..prm.n_trees {
        match task {
            Task::Regression => {
                for i in 0..n {
                    resid[i] = y[i] - score[i];
                }
            }
            Task::Classification => {
                for i in 0..n {
                    let pi = sigmoid(score[i]);
                    resid[i] = y[i] - pi;
                    hess[i] = pi * (1.0 - pi);
                }
            }
        }
        let mut rng = rng_from(spec.seed, &[0xb0, round as u64]);
        let rows: Vec<usize> = if m < n {
            let mut r = sample(&mut rng, n, m).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let tree = grow(&binned, &resid, rows, &cfg, &mut rng, |rows| match task {
            Task::Regression => {
                let vals: Vec<f64> = rows.iter().map(|&r| resid[r]).collect();
                offset_mean(&vals)
            }
            Task::Classification => {
                let g: f64 = rows.iter().map(|&r| resid[r]).sum();
                let h: f64 = rows.iter().map(|&r| hess[r]).sum();
                (g / h.max(1e-12)).clamp(-MAX_LEAF_STEP, MAX_LEAF_STEP)
            }
        });
        for (i, s) in score.iter_mut().enumerate() {
            *s += prm.learning_rate * tree.predict_row(x, i);
        }
        trees.push(tree);
    }
    Ok(FittedLearner {
        spec: spec.clone(),
        task,
        n_features: p,
        standardization: None,
        model: Model::Boosting {
            init,
            learning_rate: prm.learning_rate,
            trees,
        },
        degenerate: false,
        converged: true,
    })
}

pub(super) fn predict(init: f64, learning_rate: f64, trees: &[Tree], x: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![init; x.nrows()];
    for t in trees {
        for (i, o) in out.iter_mut().enumerate() {
            *o += learning_rate * t.predict_row(x, i);
        }
    }
    out
}

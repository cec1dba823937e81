//! Grid search by k-fold cross-validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_learner, LearnerSpec, Task};
use crate::error::{Error, Result};
use crate::numeric::{clamp_prob, pairwise_sum, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    LogLoss,
}

impl Metric {
    pub fn task(self) -> Task {
        match self {
            Metric::Mse => Task::Regression,
            Metric::LogLoss => Task::Classification,
        }
    }

    /// Summed loss (not averaged) so fold contributions add up exactly.
    fn total(self, y: &[f64], pred: &[f64]) -> f64 {
        let terms: Vec<f64> = match self {
            Metric::Mse => y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).collect(),
            Metric::LogLoss => y
                .iter()
                .zip(pred)
                .map(|(a, p)| {
                    let p = clamp_prob(*p);
                    -(a * p.ln() + (1.0 - a) * (1.0 - p).ln())
                })
                .collect(),
        };
        pairwise_sum(&terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: LearnerSpec,
    pub best_index: usize,
    /// Cross-validated mean loss of every grid member, in grid order. Empty
    /// for a singleton grid, which is returned without cross-validation.
    pub scores: Vec<f64>,
}

fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &[0xc5]));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn rows_of(x: &DMatrix<f64>, y: &[f64], rows: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
    (x.select_rows(rows), rows.iter().map(|&i| y[i]).collect())
}

/// Mean k-fold cross-validated loss of one spec.
pub fn cv_score(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64], k: usize, metric: Metric, seed: u64) -> Result<f64> {
    let n = y.len();
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    if x.nrows() != n {
        return Err(Error::Dimension(format!("design has {} rows but target has {n}", x.nrows())));
    }
    if n < 2 * k {
        return Err(Error::Validation(format!(
            "{n} rows are too few for {k}-fold cross-validation"
        )));
    }
    let fold = fold_assignment(n, k, seed);
    let mut total = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let (xtr, ytr) = rows_of(x, y, &train);
        let (xte, yte) = rows_of(x, y, &test);
        let model = fit_learner(spec, metric.task(), &xtr, &ytr)?;
        total += metric.total(&yte, &model.predict(&xte)?);
    }
    Ok(total / n as f64)
}

/// Returns the grid member with the smallest cross-validated loss; ties go
/// to the earliest grid position. All candidates share one fold assignment.
pub fn tune(grid: &[LearnerSpec], x: &DMatrix<f64>, y: &[f64], k: usize, metric: Metric, seed: u64) -> Result<TuneOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidSpec("tuning grid is empty".into()));
    }
    if grid.len() == 1 {
        return Ok(TuneOutcome {
            best: grid[0].clone(),
            best_index: 0,
            scores: Vec::new(),
        });
    }
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|s| cv_score(s, x, y, k, metric, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best_index] || (scores[best_index].is_nan() && !s.is_nan()) {
            best_index = i;
        }
    }
    Ok(TuneOutcome {
        best: grid[best_index].clone(),
        best_index,
        scores,
    })
}

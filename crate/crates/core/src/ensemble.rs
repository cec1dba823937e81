//! Stacked ensembles: tuned base learners fit on one fold, combined by a
//! plain linear (regression) or logistic (classification) meta model fit on
//! a disjoint fold.
//!
//! Meta weights are unconstrained regression coefficients. Classification
//! meta features are the base predicted probabilities.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{fit_learner, tune, FittedLearner, LearnerSpec, Metric, Task};
use crate::learners::linear::{irls, with_intercept_column};
use crate::numeric::{clamp_prob, condition_number, derive_seed, logit, sigmoid, solve_spd};

/// Relative ridge added to the meta normal equations, as a multiple of the
/// mean diagonal entry.
pub const META_JITTER: f64 = 1e-8;
/// Meta Gram matrices with a condition number above this are flagged as
/// collinear.
pub const COLLINEARITY_THRESHOLD: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    /// Cross-validation folds used to tune each base learner's grid.
    pub cv_folds: usize,
    /// Fit the meta model with an intercept.
    pub meta_intercept: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            cv_folds: 3,
            meta_intercept: true,
        }
    }
}

/// A fitted stack. Regression output is `w0 + sum_m w_m f_m(x)`;
/// classification output is `sigmoid(w0 + sum_m w_m p_m(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedEnsemble {
    pub task: Task,
    pub base_models: Vec<FittedLearner>,
    /// Intercept followed by one weight per base model. The intercept is 0
    /// when the meta model was fit without one.
    pub meta_weights: Vec<f64>,
    pub meta_intercept: bool,
    /// Condition number of the meta Gram matrix before jitter.
    pub meta_condition: f64,
    pub collinear: bool,
    /// A base or meta classification target was constant; the affected
    /// model predicts the constant rate.
    pub degenerate: bool,
    /// Subject ids the base models were trained on.
    pub train_rows: Vec<usize>,
    /// Subject ids the meta model was trained on.
    pub meta_rows: Vec<usize>,
}

pub type StackedRegressor = StackedEnsemble;
pub type StackedClassifier = StackedEnsemble;

/// A block of training rows with their subject ids.
#[derive(Clone, Copy)]
pub struct Rows<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub ids: &'a [usize],
}

fn metric_for(task: Task) -> Metric {
    match task {
        Task::Regression => Metric::Mse,
        Task::Classification => Metric::LogLoss,
    }
}

/// Tunes every grid on the given rows, returning one spec per grid with a
/// seed derived from `seed` and the grid position.
pub fn tune_bases(
    grids: &[Vec<LearnerSpec>],
    task: Task,
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &StackConfig,
    seed: u64,
) -> Result<Vec<LearnerSpec>> {
    if grids.is_empty() {
        return Err(Error::InvalidSpec("at least one base learner grid is required".into()));
    }
    grids
        .par_iter()
        .enumerate()
        .map(|(m, grid)| {
            let s = derive_seed(seed, &[m as u64]);
            let seeded: Vec<LearnerSpec> = grid
                .iter()
                .filter(|spec| spec.kind.supports(task))
                .map(|spec| spec.clone().with_seed(derive_seed(s, &[spec.seed])))
                .collect();
            if seeded.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "base learner grid {m} has no member supporting {task:?}"
                )));
            }
            Ok(tune(&seeded, x, y, cfg.cv_folds, metric_for(task), s)?.best)
        })
        .collect()
}

/// Tunes the grids and fits the stack in one call.
pub fn fit_stacked(
    grids: &[Vec<LearnerSpec>],
    task: Task,
    train: Rows<'_>,
    meta: Rows<'_>,
    cfg: &StackConfig,
    seed: u64,
) -> Result<StackedEnsemble> {
    check_rows(train, meta)?;
    let specs = tune_bases(grids, task, train.x, train.y, cfg, seed)?;
    fit_stacked_tuned(&specs, task, train, meta, cfg)
}

fn check_rows(train: Rows<'_>, meta: Rows<'_>) -> Result<()> {
    for r in [train, meta] {
        if r.ids.is_empty() {
            return Err(Error::Validation("empty fold passed to the ensemble".into()));
        }
        if r.x.nrows() != r.y.len() || r.y.len() != r.ids.len() {
            return Err(Error::Dimension("fold rows, targets and ids disagree in length".into()));
        }
    }
    let mut a = train.ids.to_vec();
    a.sort_unstable();
    if meta.ids.iter().any(|i| a.binary_search(i).is_ok()) {
        return Err(Error::Validation(
            "base-learner and meta-learner folds share subjects".into(),
        ));
    }
    Ok(())
}

/// Fits base models with already-tuned specs on `train`, then the meta
/// model on `meta`.
pub fn fit_stacked_tuned(
    specs: &[LearnerSpec],
    task: Task,
    train: Rows<'_>,
    meta: Rows<'_>,
    cfg: &StackConfig,
) -> Result<StackedEnsemble> {
    check_rows(train, meta)?;
    if specs.is_empty() {
        return Err(Error::InvalidSpec("at least one base learner is required".into()));
    }
    let base_models: Vec<FittedLearner> = specs
        .par_iter()
        .map(|s| fit_learner(s, task, train.x, train.y))
        .collect::<Result<_>>()?;
    let features = base_feature_matrix(&base_models, meta.x)?;
    let (meta_weights, meta_condition, meta_degenerate) = fit_meta(task, &features, meta.y, cfg.meta_intercept)?;
    let degenerate = meta_degenerate || base_models.iter().any(|m| m.degenerate);
    Ok(StackedEnsemble {
        task,
        base_models,
        meta_weights,
        meta_intercept: cfg.meta_intercept,
        meta_condition,
        collinear: !(meta_condition <= COLLINEARITY_THRESHOLD),
        degenerate,
        train_rows: train.ids.to_vec(),
        meta_rows: meta.ids.to_vec(),
    })
}

fn base_feature_matrix(models: &[FittedLearner], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols: Vec<Vec<f64>> = models.iter().map(|m| m.predict(x)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(x.nrows(), models.len(), |i, m| cols[m][i]))
}

fn fit_meta(task: Task, features: &DMatrix<f64>, y: &[f64], intercept: bool) -> Result<(Vec<f64>, f64, bool)> {
    let design = if intercept {
        with_intercept_column(features)
    } else {
        features.clone()
    };
    let gram = design.tr_mul(&design);
    let cond = condition_number(&gram);
    let k = gram.nrows();
    let jitter = META_JITTER * gram.trace() / k as f64;
    let beta: DVector<f64> = match task {
        Task::Regression => {
            let mut g = gram;
            for j in 0..k {
                g[(j, j)] += jitter;
            }
            let rhs = design.tr_mul(&DVector::from_column_slice(y));
            solve_spd(&g, &rhs)?
        }
        Task::Classification => {
            let ones = y.iter().filter(|&&v| v == 1.0).count();
            if ones == 0 || ones == y.len() {
                let mut w = vec![0.0; features.ncols() + 1];
                w[0] = logit(clamp_prob(ones as f64 / y.len() as f64));
                return Ok((w, cond, true));
            }
            irls(&design, y, jitter, 100)?.beta
        }
    };
    let mut w = Vec::with_capacity(features.ncols() + 1);
    if intercept {
        w.extend(beta.iter());
    } else {
        w.push(0.0);
        w.extend(beta.iter());
    }
    Ok((w, cond, false))
}

impl StackedEnsemble {
    /// Builds a stack from given base models and weights (intercept first).
    pub fn from_parts(task: Task, base_models: Vec<FittedLearner>, meta_weights: Vec<f64>) -> Result<Self> {
        if meta_weights.len() != base_models.len() + 1 {
            return Err(Error::Dimension(format!(
                "{} base models need {} meta weights, got {}",
                base_models.len(),
                base_models.len() + 1,
                meta_weights.len()
            )));
        }
        Ok(StackedEnsemble {
            task,
            base_models,
            meta_weights,
            meta_intercept: true,
            meta_condition: f64::NAN,
            collinear: false,
            degenerate: false,
            train_rows: Vec::new(),
            meta_rows: Vec::new(),
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict_stacked(self, x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn predict_stacked(model: &StackedEnsemble, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let f = base_feature_matrix(&model.base_models, x)?;
    let w = &model.meta_weights;
    Ok((0..x.nrows())
        .map(|i| {
            let mut s = w[0];
            for m in 0..f.ncols() {
                s += w[m + 1] * f[(i, m)];
            }
            match model.task {
                Task::Regression => s,
                Task::Classification => clamp_prob(sigmoid(s)),
            }
        })
        .collect())
}

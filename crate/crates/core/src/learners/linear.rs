use nalgebra::{DMatrix, DVector};

use super::{FittedLearner, LearnerSpec, Model, Standardization, Task};
use crate::error::Result;
use crate::numeric::{sigmoid, solve_spd};

/// Ridge jitter added to logistic Hessians so quasi-separated data still
/// yields a finite Newton step.
pub(crate) const LOGISTIC_RIDGE: f64 = 1e-8;

pub(super) fn fit_ols(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    let std = Standardization::fit(x);
    let xs = std.apply(x);
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let gram = xs.tr_mul(&xs);
    let rhs = xs.tr_mul(&yc);
    let beta = solve_spd(&gram, &rhs)?;
    let (intercept, coefficients) = unstandardize(y_mean, beta.as_slice(), &std);
    Ok(FittedLearner {
        spec: spec.clone(),
        task: Task::Regression,
        n_features: x.ncols(),
        standardization: Some(std),
        model: Model::Linear {
            intercept,
            coefficients,
        },
        degenerate: false,
        converged: true,
    })
}

pub(super) fn fit_logistic(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    let std = Standardization::fit(x);
    let xs = std.apply(x);
    let design = with_intercept_column(&xs);
    let fit = irls(&design, y, LOGISTIC_RIDGE, 100)?;
    let (intercept, coefficients) = unstandardize(fit.beta[0], &fit.beta.as_slice()[1..], &std);
    Ok(FittedLearner {
        spec: spec.clone(),
        task: Task::Classification,
        n_features: x.ncols(),
        standardization: Some(std),
        model: Model::Linear {
            intercept,
            coefficients,
        },
        degenerate: false,
        converged: fit.converged,
    })
}

/// Maps standardized-scale coefficients back to the original feature scale.
pub(super) fn unstandardize(intercept_std: f64, beta_std: &[f64], std: &Standardization) -> (f64, Vec<f64>) {
    let coefficients: Vec<f64> = beta_std
        .iter()
        .zip(&std.scales)
        .map(|(b, s)| b / s)
        .collect();
    let shift: f64 = coefficients.iter().zip(&std.means).map(|(c, m)| c * m).sum();
    (intercept_std - shift, coefficients)
}

pub(crate) fn with_intercept_column(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    d.columns_mut(1, x.ncols()).copy_from(x);
    d
}

pub(crate) struct IrlsFit {
    pub beta: DVector<f64>,
    pub converged: bool,
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn penalized_loglik(design: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = design * beta;
    let ll: f64 = eta.iter().zip(y).map(|(e, yi)| yi * e - softplus(*e)).sum();
    ll - 0.5 * ridge * beta.norm_squared()
}

/// Newton-Raphson (iteratively reweighted least squares) for logistic
/// regression on a caller-supplied design, with a ridge term `ridge/2 ||b||^2`
/// and step halving.
pub(crate) fn irls(design: &DMatrix<f64>, y: &[f64], ridge: f64, max_iter: usize) -> Result<IrlsFit> {
    let k = design.ncols();
    let mut beta = DVector::zeros(k);
    let yv = DVector::from_column_slice(y);
    let mut converged = false;
    let mut ll = penalized_loglik(design, y, &beta, ridge);
    for _ in 0..max_iter {
        let eta = design * &beta;
        let p = eta.map(sigmoid);
        let grad = design.tr_mul(&(&yv - &p)) - &beta * ridge;
        if grad.amax() < 1e-10 {
            converged = true;
            break;
        }
        let mut weighted = design.clone();
        for (i, pi) in p.iter().enumerate() {
            let w = (pi * (1.0 - pi)).max(1e-12).sqrt();
            weighted.row_mut(i).scale_mut(w);
        }
        let mut hess = weighted.tr_mul(&weighted);
        for j in 0..k {
            hess[(j, j)] += ridge;
        }
        let step = solve_spd(&hess, &grad)?;
        let mut scale = 1.0;
        let mut accepted = false;
        while scale > 1e-10 {
            let candidate = &beta + &step * scale;
            let cand_ll = penalized_loglik(design, y, &candidate, ridge);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || (&step * scale).amax() < 1e-13 {
            converged = accepted;
            break;
        }
    }
    Ok(IrlsFit { beta, converged })
}

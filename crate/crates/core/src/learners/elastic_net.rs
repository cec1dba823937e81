//! Elastic net by cyclic coordinate descent on standardized features.
//!
//! Regression minimizes
//! `(1/2n) ||y - b0 - X b||^2 + lambda * (alpha ||b||_1 + (1 - alpha)/2 ||b||^2)`;
//! classification replaces the squared loss with the mean negative
//! log-likelihood and runs coordinate descent inside a proximal Newton
//! (IRLS) loop.

use nalgebra::DMatrix;

use super::linear::unstandardize;
use super::{FittedLearner, LearnerKind, LearnerSpec, Model, Standardization, Task};
use crate::error::{Error, Result};
use crate::numeric::{clamp_prob, logit, sigmoid};

const TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 10_000;

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Penalty {
    l1: f64,
    l2: f64,
}

/// Weighted coordinate descent on `(1/2n) sum w_i (r_i)^2 + penalty` where
/// `r` is the current residual, updated in place. Returns sweeps used and
/// whether the coefficient change dropped below tolerance.
fn coordinate_descent(
    xs: &DMatrix<f64>,
    weights: Option<&[f64]>,
    beta: &mut [f64],
    intercept: Option<&mut f64>,
    resid: &mut [f64],
    pen: &Penalty,
    max_sweeps: usize,
) -> (usize, bool) {
    let n = xs.nrows();
    let p = xs.ncols();
    let inv_n = 1.0 / n as f64;
    let data = xs.as_slice();
    let col = |j: usize| &data[j * n..(j + 1) * n];
    let curv: Vec<f64> = (0..p)
        .map(|j| match weights {
            None => inv_n * dot(col(j), col(j)),
            Some(w) => inv_n * col(j).iter().zip(w).map(|(x, wi)| wi * x * x).sum::<f64>(),
        })
        .collect();
    let w_sum: f64 = weights.map(|w| w.iter().sum()).unwrap_or(n as f64);
    let mut intercept = intercept;

    let mut sweep = |active_only: bool, beta: &mut [f64], resid: &mut [f64]| -> f64 {
        let mut max_change = 0.0_f64;
        for j in 0..p {
            if curv[j] <= 0.0 || (active_only && beta[j] == 0.0) {
                continue;
            }
            let xj = col(j);
            let grad = match weights {
                None => inv_n * dot(xj, resid),
                Some(w) => inv_n * xj.iter().zip(w).zip(resid.iter()).map(|((x, wi), r)| x * wi * r).sum::<f64>(),
            };
            let z = grad + curv[j] * beta[j];
            let new = soft_threshold(z, pen.l1) / (curv[j] + pen.l2);
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, x) in resid.iter_mut().zip(xj) {
                    *r -= delta * x;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs() * curv[j].sqrt());
            }
        }
        if let Some(b0) = intercept.as_deref_mut() {
            let shift = match weights {
                None => resid.iter().sum::<f64>() / w_sum,
                Some(w) => resid.iter().zip(w).map(|(r, wi)| r * wi).sum::<f64>() / w_sum,
            };
            if shift != 0.0 {
                *b0 += shift;
                for r in resid.iter_mut() {
                    *r -= shift;
                }
                max_change = max_change.max(shift.abs());
            }
        }
        max_change
    };

    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        if sweep(false, beta, resid) < TOL {
            return (sweeps, true);
        }
        while sweeps < max_sweeps {
            sweeps += 1;
            if sweep(true, beta, resid) < TOL {
                break;
            }
        }
    }
    (sweeps, false)
}

pub(super) fn fit(spec: &LearnerSpec, task: Task, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    let std = Standardization::fit(x);
    let xs = std.apply(x);
    let pen = Penalty {
        l1: spec.params.lambda * spec.params.alpha,
        l2: spec.params.lambda * (1.0 - spec.params.alpha),
    };
    let p = x.ncols();
    let mut beta = vec![0.0; p];
    let (b0, converged) = match task {
        Task::Regression => {
            let y_mean = y.iter().sum::<f64>() / y.len() as f64;
            let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
            let (_, ok) = coordinate_descent(&xs, None, &mut beta, None, &mut resid, &pen, MAX_SWEEPS);
            (y_mean, ok)
        }
        Task::Classification => fit_logistic_path(&xs, y, &mut beta, &pen),
    };
    let (intercept, coefficients) = unstandardize(b0, &beta, &std);
    Ok(FittedLearner {
        spec: spec.clone(),
        task,
        n_features: p,
        standardization: Some(std),
        model: Model::Linear {
            intercept,
            coefficients,
        },
        degenerate: false,
        converged,
    })
}

fn penalized_nll(xs: &DMatrix<f64>, y: &[f64], b0: f64, beta: &[f64], pen: &Penalty) -> f64 {
    let n = y.len() as f64;
    let eta = linear_predictor(xs, b0, beta);
    let nll: f64 = eta
        .iter()
        .zip(y)
        .map(|(e, yi)| e.max(0.0) + (-e.abs()).exp().ln_1p() - yi * e)
        .sum::<f64>()
        / n;
    nll + pen.l1 * beta.iter().map(|b| b.abs()).sum::<f64>()
        + 0.5 * pen.l2 * beta.iter().map(|b| b * b).sum::<f64>()
}

fn linear_predictor(xs: &DMatrix<f64>, b0: f64, beta: &[f64]) -> Vec<f64> {
    let n = xs.nrows();
    let data = xs.as_slice();
    let mut eta = vec![b0; n];
    for (j, b) in beta.iter().enumerate() {
        if *b != 0.0 {
            for (e, x) in eta.iter_mut().zip(&data[j * n..(j + 1) * n]) {
                *e += b * x;
            }
        }
    }
    eta
}

/// Proximal Newton: each outer step forms the IRLS quadratic approximation
/// and solves its penalized weighted least squares by coordinate descent.
fn fit_logistic_path(xs: &DMatrix<f64>, y: &[f64], beta: &mut [f64], pen: &Penalty) -> (f64, bool) {
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut b0 = logit(clamp_prob(y_mean));
    let mut obj = penalized_nll(xs, y, b0, beta, pen);
    let mut sweeps_left = MAX_SWEEPS;
    for _ in 0..100 {
        let eta = linear_predictor(xs, b0, beta);
        let prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = prob.iter().map(|p| (p * (1.0 - p)).max(1e-5)).collect();
        let mut resid: Vec<f64> = y
            .iter()
            .zip(&prob)
            .zip(&w)
            .map(|((yi, pi), wi)| (yi - pi) / wi)
            .collect();
        let old_beta = beta.to_vec();
        let old_b0 = b0;
        let mut new_b0 = b0;
        let (used, _) = coordinate_descent(
            xs,
            Some(&w),
            beta,
            Some(&mut new_b0),
            &mut resid,
            pen,
            sweeps_left.min(1000),
        );
        sweeps_left = sweeps_left.saturating_sub(used);
        b0 = new_b0;
        let mut new_obj = penalized_nll(xs, y, b0, beta, pen);
        if new_obj > obj + 1e-12 * obj.abs() {
            let proposed = beta.to_vec();
            let proposed_b0 = b0;
            let mut shrink = 1.0;
            while new_obj > obj + 1e-12 * obj.abs() && shrink > 1e-6 {
                shrink *= 0.5;
                for ((b, ob), pb) in beta.iter_mut().zip(&old_beta).zip(&proposed) {
                    *b = ob + shrink * (pb - ob);
                }
                b0 = old_b0 + shrink * (proposed_b0 - old_b0);
                new_obj = penalized_nll(xs, y, b0, beta, pen);
            }
        }
        obj = new_obj;
        let change = beta
            .iter()
            .zip(&old_beta)
            .map(|(a, b)| (a - b).abs())
            .fold((b0 - old_b0).abs(), f64::max);
        if change < TOL {
            return (b0, true);
        }
        if sweeps_left == 0 {
            break;
        }
    }
    (b0, false)
}

/// Largest violation of the elastic-net stationarity (subgradient)
/// conditions over the slope coordinates, on the standardized scale.
pub fn kkt_check(model: &FittedLearner, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    if model.spec.kind != LearnerKind::ElasticNet {
        return Err(Error::InvalidSpec(format!(
            "KKT check applies to elastic net models, got {:?}",
            model.spec.kind
        )));
    }
    if x.ncols() != model.n_features || x.nrows() != y.len() {
        return Err(Error::Dimension("KKT check data does not match the model".into()));
    }
    let (intercept, coefs) = model
        .linear_coefficients()
        .ok_or_else(|| Error::InvalidSpec("elastic net without linear coefficients".into()))?;
    if model.n_features == 0 {
        return Ok(0.0);
    }
    let std = match &model.standardization {
        Some(s) => s,
        None => return Ok(0.0),
    };
    let xs = std.apply(x);
    let beta: Vec<f64> = coefs.iter().zip(&std.scales).map(|(c, s)| c * s).collect();
    let b0 = intercept + coefs.iter().zip(&std.means).map(|(c, m)| c * m).sum::<f64>();
    let eta = linear_predictor(&xs, b0, &beta);
    let resid: Vec<f64> = match model.task {
        Task::Regression => y.iter().zip(&eta).map(|(yi, e)| yi - e).collect(),
        Task::Classification => y.iter().zip(&eta).map(|(yi, e)| yi - sigmoid(*e)).collect(),
    };
    let n = y.len();
    let lambda = model.spec.params.lambda;
    let alpha = model.spec.params.alpha;
    let data = xs.as_slice();
    let mut worst = 0.0_f64;
    for (j, b) in beta.iter().enumerate() {
        let g = dot(&data[j * n..(j + 1) * n], &resid) / n as f64 - lambda * (1.0 - alpha) * b;
        let v = if *b != 0.0 {
            (g - lambda * alpha * b.signum()).abs()
        } else {
            (g.abs() - lambda * alpha).max(0.0)
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

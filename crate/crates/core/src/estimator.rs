//! The doubly robust estimating equation for a linear marginal structural
//! model, its closed-form and Newton solvers, and a Gateaux-derivative probe
//! of Neyman orthogonality.
//!
//! For T timepoints the per-subject score is `Psi = S_0 + S_1 + ... + S_T`:
//!
//! * `S_0 = sum_a d(a) (eta_1(a) - tau(a; theta))` over all 2^T regimes,
//! * `S_t = sum_s d(A_1..A_t, s) W_t (eta_{t+1}(s) - eta_t(A_t, s))` over
//!   future suffixes s = (a_{t+1}, ..., a_T), for t < T,
//! * `S_T = d(A) W_T (Y_T - eta_T(A_T))`,
//!
//! with `W_t = prod_{k<=t} 1/pi_k` the cumulative inverse observed-arm
//! propensity and `d = (1, a_1, ..., a_T)`. Only `S_0` depends on theta,
//! and affinely, so the pooled equation reduces to a (T+1)x(T+1) linear
//! system with the fixed matrix `G = sum_a d(a) d(a)^T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{FoldSplit, LongitudinalDataset, TreatmentRegime};
use crate::error::{Error, Result};
use crate::nuisance::{cumulative_weights_from, IceStack, NuisanceValues, PropensityFit, Provenance};
use crate::numeric::{pairwise_sum, solve_general};

/// `tau(a; theta) = beta_0 + sum_t beta_t a_t`, with theta ordered
/// `(beta_0, beta_1, ..., beta_T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearMsm {
    pub n_timepoints: usize,
}

pub type MsmSpec = LinearMsm;

impl LinearMsm {
    pub fn new(n_timepoints: usize) -> Self {
        LinearMsm { n_timepoints }
    }

    pub fn dim(&self) -> usize {
        self.n_timepoints + 1
    }

    /// Gradient of tau with respect to theta: `(1, a_1, ..., a_T)`.
    pub fn d(&self, regime: &[u8]) -> Vec<f64> {
        std::iter::once(1.0).chain(regime.iter().map(|&a| a as f64)).collect()
    }

    pub fn tau(&self, regime: &[u8], theta: &[f64]) -> f64 {
        theta[0] + regime.iter().zip(&theta[1..]).map(|(&a, b)| a as f64 * b).sum::<f64>()
    }

    /// `G = sum over all regimes of d d^T`.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut g = DMatrix::zeros(k, k);
        for r in 0..1usize << self.n_timepoints {
            let d = DVector::from_vec(self.d(TreatmentRegime::from_index(1, self.n_timepoints, r).values()));
            g += &d * d.transpose();
        }
        g
    }

    /// Mean Jacobian of the score with respect to theta, `-G`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        -self.gram()
    }

    /// Average treatment effect of all-ones versus all-zeros: `sum_t beta_t`.
    pub fn ate(&self, theta: &[f64]) -> f64 {
        theta[1..].iter().sum()
    }
}

/// Per-subject score pieces evaluated at `theta`. Rows are subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub theta: Vec<f64>,
    pub s0: DMatrix<f64>,
    /// `S_1, ..., S_T`.
    pub terms: Vec<DMatrix<f64>>,
    pub psi: DMatrix<f64>,
    pub provenance: Option<Provenance>,
}

/// One subject's score pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub s0: Vec<f64>,
    pub terms: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| pairwise_sum(c.as_slice()) / n))
}

impl ScoreSet {
    pub fn n_subjects(&self) -> usize {
        self.psi.nrows()
    }

    pub fn triple(&self, i: usize) -> ScoreTriple {
        let row = |m: &DMatrix<f64>| m.row(i).iter().copied().collect::<Vec<_>>();
        ScoreTriple {
            s0: row(&self.s0),
            terms: self.terms.iter().map(row).collect(),
            psi: row(&self.psi),
        }
    }

    /// `(1/n) sum_i Psi_i`, with fixed-order pairwise summation.
    pub fn mean_psi(&self) -> DVector<f64> {
        column_means(&self.psi)
    }

    /// `(1/n) sum_i (S_1 + ... + S_T)_i`.
    pub fn mean_augmentation(&self) -> DVector<f64> {
        let mut acc = DMatrix::zeros(self.psi.nrows(), self.psi.ncols());
        for t in &self.terms {
            acc += t;
        }
        column_means(&acc)
    }
}

/// Which part of the score to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// The full doubly robust score.
    Full,
    /// The final weighted-residual term `S_T` alone.
    FinalTermOnly,
    /// Plain inverse probability weighting, `d(A) W_T (Y_T - tau(A; theta))`.
    Ipw,
}

fn check_inputs(ds: &LongitudinalDataset, outcome: usize, nuis: &NuisanceValues, msm: &LinearMsm, theta: &[f64]) -> Result<()> {
    nuis.validate()?;
    let n_t = ds.n_timepoints();
    if nuis.n_timepoints() != n_t || msm.n_timepoints != n_t {
        return Err(Error::Dimension(format!(
            "dataset has {n_t} timepoints, nuisances {} and model {}",
            nuis.n_timepoints(),
            msm.n_timepoints
        )));
    }
    if nuis.n_subjects() != ds.n_subjects() {
        return Err(Error::Dimension(format!(
            "nuisances cover {} subjects, dataset has {}",
            nuis.n_subjects(),
            ds.n_subjects()
        )));
    }
    if theta.len() != msm.dim() {
        return Err(Error::Dimension(format!(
            "theta has length {}, expected {}",
            theta.len(),
            msm.dim()
        )));
    }
    if outcome == 0 || outcome > ds.n_outcomes() {
        return Err(Error::Validation(format!("outcome index {outcome} out of range")));
    }
    Ok(())
}

/// Scores from explicit nuisance values.
pub fn compute_scores_with(
    ds: &LongitudinalDataset,
    outcome: usize,
    nuis: &NuisanceValues,
    msm: &LinearMsm,
    theta: &[f64],
) -> Result<ScoreSet> {
    compute_score_variant(ds, outcome, nuis, msm, theta, ScoreVariant::Full)
}

pub fn compute_score_variant(
    ds: &LongitudinalDataset,
    outcome: usize,
    nuis: &NuisanceValues,
    msm: &LinearMsm,
    theta: &[f64],
    variant: ScoreVariant,
) -> Result<ScoreSet> {
    check_inputs(ds, outcome, nuis, msm, theta)?;
    let n = ds.n_subjects();
    let n_t = ds.n_timepoints();
    let k = msm.dim();
    let weights: Vec<Vec<f64>> = (1..=n_t)
        .map(|t| cumulative_weights_from(&nuis.observed_arm, t))
        .collect::<Result<_>>()?;
    let y = ds.outcome(n_t, outcome);
    let paths: Vec<Vec<u8>> = (0..n).map(|i| ds.treatment_path(i)).collect();

    let mut s0 = DMatrix::zeros(n, k);
    if variant == ScoreVariant::Full {
        for r in 0..1usize << n_t {
            let regime = TreatmentRegime::from_index(1, n_t, r);
            let d = msm.d(regime.values());
            let tau = msm.tau(regime.values(), theta);
            let eta1 = &nuis.eta[0][r];
            for i in 0..n {
                let resid = eta1[i] - tau;
                for c in 0..k {
                    s0[(i, c)] += d[c] * resid;
                }
            }
        }
    }

    let mut terms = vec![DMatrix::zeros(n, k); n_t];
    if variant == ScoreVariant::Full {
        for t in 1..n_t {
            let n_future = 1usize << (n_t - t);
            let m = &mut terms[t - 1];
            for s in 0..n_future {
                let suffix = TreatmentRegime::from_index(t + 1, n_t - t, s);
                let next = &nuis.eta[t][s];
                for i in 0..n {
                    let a_t = paths[i][t - 1] as usize;
                    let cur = nuis.eta[t - 1][a_t * n_future + s][i];
                    let val = weights[t - 1][i] * (next[i] - cur);
                    let mut regime = paths[i][..t].to_vec();
                    regime.extend_from_slice(suffix.values());
                    let d = msm.d(&regime);
                    for c in 0..k {
                        m[(i, c)] += d[c] * val;
                    }
                }
            }
        }
    }
    let last = &mut terms[n_t - 1];
    for i in 0..n {
        let d = msm.d(&paths[i]);
        let resid = match variant {
            ScoreVariant::Ipw => y[i] - msm.tau(&paths[i], theta),
            _ => y[i] - nuis.eta[n_t - 1][paths[i][n_t - 1] as usize][i],
        };
        let val = weights[n_t - 1][i] * resid;
        for c in 0..k {
            last[(i, c)] = d[c] * val;
        }
    }

    let mut psi = s0.clone();
    for t in &terms {
        psi += t;
    }
    Ok(ScoreSet {
        theta: theta.to_vec(),
        s0,
        terms,
        psi,
        provenance: nuis.provenance.clone(),
    })
}

/// Scores from fitted propensity and ICE nuisances; fails when the two were
/// fit on different fold splits.
pub fn compute_scores(
    ds: &LongitudinalDataset,
    pf: &PropensityFit,
    ice: &IceStack,
    msm: &LinearMsm,
    theta: &[f64],
) -> Result<ScoreSet> {
    let nuis = NuisanceValues::from_fits(pf, ice)?;
    compute_scores_with(ds, ice.outcome, &nuis, msm, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    ClosedForm,
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: Vec<f64>,
    pub ate: f64,
    pub solver: Solver,
    pub condition_number: f64,
    pub iterations: usize,
    /// Euclidean norm of the mean score at the returned theta.
    pub score_norm: f64,
}

/// Closed-form root of the pooled equation from scores evaluated at any
/// theta_0: `G theta = mean(Psi(theta_0)) + G theta_0`.
pub fn solve_linear(scores: &ScoreSet, msm: &LinearMsm) -> Result<ThetaEstimate> {
    let k = msm.dim();
    if scores.theta.len() != k || scores.psi.ncols() != k {
        return Err(Error::Dimension("scores do not match the model dimension".into()));
    }
    if scores.n_subjects() == 0 {
        return Err(Error::Validation("no subjects to score".into()));
    }
    let g = msm.gram();
    let theta0 = DVector::from_column_slice(&scores.theta);
    let rhs = scores.mean_psi() + &g * &theta0;
    let (theta, cond) = solve_general(&g, &rhs)?;
    let resid = &rhs - &g * &theta;
    let theta: Vec<f64> = theta.iter().copied().collect();
    Ok(ThetaEstimate {
        ate: msm.ate(&theta),
        theta,
        solver: Solver::ClosedForm,
        condition_number: cond,
        iterations: 0,
        score_norm: resid.norm(),
    })
}

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;

/// Newton-Raphson on the mean score. Convergence is declared when the mean
/// score norm falls below `tol * (1 + s)`, with `s` the mean per-subject
/// score norm at the start, so the criterion is scale free.
pub fn solve_newton(
    ds: &LongitudinalDataset,
    outcome: usize,
    nuis: &NuisanceValues,
    msm: &LinearMsm,
    theta_init: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ThetaEstimate> {
    let jac = msm.jacobian();
    let cond = crate::numeric::condition_number(&jac);
    let mut theta = DVector::from_column_slice(theta_init);
    let first = compute_scores_with(ds, outcome, nuis, msm, theta.as_slice())?;
    let scale = {
        let norms: Vec<f64> = first.psi.row_iter().map(|r| r.norm()).collect();
        1.0 + pairwise_sum(&norms) / norms.len() as f64
    };
    let mut scores = first;
    let mut iter = 0;
    loop {
        let g = scores.mean_psi();
        let norm = g.norm();
        if norm < tol * scale {
            let theta: Vec<f64> = theta.iter().copied().collect();
            return Ok(ThetaEstimate {
                ate: msm.ate(&theta),
                theta,
                solver: Solver::Newton,
                condition_number: cond,
                iterations: iter,
                score_norm: norm,
            });
        }
        if iter >= max_iter {
            return Err(Error::NonConvergence {
                iterations: iter,
                norm,
            });
        }
        let (step, _) = solve_general(&jac, &g)?;
        theta -= step;
        iter += 1;
        scores = compute_scores_with(ds, outcome, nuis, msm, theta.as_slice())?;
    }
}

/// Pooled cross-fit solve: each subject is scored with the nuisance values
/// produced by stacks whose base learners trained on the other fold.
pub fn crossfit_estimate(
    ds: &LongitudinalDataset,
    folds: &FoldSplit,
    pf: &PropensityFit,
    ice: &IceStack,
    msm: &LinearMsm,
) -> Result<(ThetaEstimate, ScoreSet)> {
    let nuis = NuisanceValues::from_fits(pf, ice)?;
    let expected = Provenance::from_folds(folds);
    if nuis.provenance.as_ref() != Some(&expected) || !expected.is_cross_fitted(folds) {
        return Err(Error::Validation(
            "nuisances were not cross-fitted on the supplied fold split".into(),
        ));
    }
    let zero = vec![0.0; msm.dim()];
    let s = compute_scores_with(ds, ice.outcome, &nuis, msm, &zero)?;
    let est = solve_linear(&s, msm)?;
    let scores = compute_scores_with(ds, ice.outcome, &nuis, msm, &est.theta)?;
    Ok((est, scores))
}

/// Perturbation direction for the orthogonality probe, shaped like
/// [`NuisanceValues`]: additive shifts to observed-arm propensities and to
/// every ICE column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub observed_arm: Vec<Vec<f64>>,
    pub eta: Vec<Vec<Vec<f64>>>,
}

impl Direction {
    pub fn zeros_like(v: &NuisanceValues) -> Self {
        Direction {
            observed_arm: v.observed_arm.iter().map(|c| vec![0.0; c.len()]).collect(),
            eta: v
                .eta
                .iter()
                .map(|cols| cols.iter().map(|c| vec![0.0; c.len()]).collect())
                .collect(),
        }
    }
}

fn perturbed(base: &NuisanceValues, dir: &Direction, r: f64) -> Result<NuisanceValues> {
    if dir.observed_arm.len() != base.observed_arm.len() || dir.eta.len() != base.eta.len() {
        return Err(Error::Dimension("direction does not match the nuisances".into()));
    }
    let observed_arm: Vec<Vec<f64>> = base
        .observed_arm
        .iter()
        .zip(&dir.observed_arm)
        .map(|(p, d)| p.iter().zip(d).map(|(a, b)| a + r * b).collect())
        .collect();
    if observed_arm.iter().flatten().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Positivity(format!(
            "perturbation of size {r} moves a propensity outside (0, 1)"
        )));
    }
    let eta: Vec<Vec<Vec<f64>>> = base
        .eta
        .iter()
        .zip(&dir.eta)
        .map(|(cols, dcols)| {
            cols.iter()
                .zip(dcols)
                .map(|(c, d)| c.iter().zip(d).map(|(a, b)| a + r * b).collect())
                .collect()
        })
        .collect();
    NuisanceValues::new(observed_arm, eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub r_grid: Vec<f64>,
    /// Mean score at each grid point, `[r][component]`.
    pub mean_score: Vec<Vec<f64>>,
    /// Central-difference derivative at r = 0, per component.
    pub derivative: Vec<f64>,
    /// Monte Carlo standard error of the derivative, per component.
    pub derivative_se: Vec<f64>,
    /// Step used for the central difference.
    pub step: f64,
}

impl ProbeResult {
    /// Largest |derivative| / SE over components.
    pub fn max_z(&self) -> f64 {
        self.derivative
            .iter()
            .zip(&self.derivative_se)
            .map(|(d, s)| if *s > 0.0 { d.abs() / s } else if *d == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

/// Evaluates the mean score along `truth + r * direction` and estimates its
/// derivative at r = 0 by a paired central difference with step equal to
/// the smallest positive grid value.
pub fn orthogonality_probe(
    ds: &LongitudinalDataset,
    outcome: usize,
    truth: &NuisanceValues,
    direction: &Direction,
    msm: &LinearMsm,
    theta: &[f64],
    r_grid: &[f64],
    variant: ScoreVariant,
) -> Result<ProbeResult> {
    let h = r_grid
        .iter()
        .copied()
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !h.is_finite() {
        return Err(Error::Validation("probe grid needs a positive step".into()));
    }
    let mut mean_score = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let s = compute_score_variant(ds, outcome, &perturbed(truth, direction, r)?, msm, theta, variant)?;
        mean_score.push(s.mean_psi().iter().copied().collect());
    }
    let plus = compute_score_variant(ds, outcome, &perturbed(truth, direction, h)?, msm, theta, variant)?;
    let minus = compute_score_variant(ds, outcome, &perturbed(truth, direction, -h)?, msm, theta, variant)?;
    let diff = (plus.psi - minus.psi) / (2.0 * h);
    let n = diff.nrows() as f64;
    let mut derivative = Vec::new();
    let mut derivative_se = Vec::new();
    for c in diff.column_iter() {
        derivative.push(pairwise_sum(c.as_slice()) / n);
        derivative_se.push(crate::numeric::sample_sd(c.as_slice()) / n.sqrt());
    }
    Ok(ProbeResult {
        r_grid: r_grid.to_vec(),
        mean_score,
        derivative,
        derivative_se,
        step: h,
    })
}

//! Comparison estimators: inverse-probability-weighted MSM with logistic
//! propensity scores (MSM-lm) and ICE g-computation with linear regressions
//! (ICE-lm). Neither uses cross-fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_history, enumerate_regimes, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::inference::{bootstrap_se, BootstrapResult};
use crate::learners::linear::with_intercept_column;
use crate::learners::{fit_learner, LearnerKind, LearnerSpec, Task};
use crate::nuisance::{cumulative_weights_from, observed_arm_probability};
use crate::numeric::{quantile, solve_general};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    MsmLm,
    IceLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    /// Per timepoint, subjects whose raw observed-arm propensity was trimmed.
    pub trim_hits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub method: BaselineMethod,
    pub ate: f64,
    /// MSM coefficients `(beta_0, ..., beta_T)` for MSM-lm.
    pub theta: Option<Vec<f64>>,
    /// Estimated mean outcome under each regime, lexicographic order, for ICE-lm.
    pub regime_means: Option<Vec<f64>>,
    pub weights: Option<WeightSummary>,
    pub bootstrap: Option<BootstrapResult>,
}

impl BaselineEstimate {
    pub fn se(&self) -> Option<f64> {
        self.bootstrap.as_ref().map(|b| b.se)
    }

    pub fn ci(&self) -> Option<(f64, f64)> {
        self.bootstrap.as_ref().map(|b| b.ci)
    }
}

fn check_outcome(ds: &LongitudinalDataset, outcome: usize) -> Result<()> {
    if outcome == 0 || outcome > ds.n_outcomes() {
        return Err(Error::Validation(format!(
            "outcome index {outcome} out of range 1..={}",
            ds.n_outcomes()
        )));
    }
    Ok(())
}

/// Per-timepoint logistic propensity scores on the history design, as
/// trimmed observed-arm probabilities `[t - 1][subject]`, plus trim counts.
pub fn logistic_propensities(ds: &LongitudinalDataset, trim: (f64, f64)) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let spec = LearnerSpec::new(LearnerKind::Logistic);
    let mut observed = Vec::with_capacity(ds.n_timepoints());
    let mut hits = Vec::with_capacity(ds.n_timepoints());
    for t in 1..=ds.n_timepoints() {
        let x = build_history(ds, t, false)?.matrix;
        let a = ds.exposure(t);
        let y: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let p = fit_learner(&spec, Task::Classification, &x, &y)?.predict(&x)?;
        let mut h = 0;
        let obs: Vec<f64> = p
            .iter()
            .zip(a)
            .map(|(&pi, &ai)| {
                let q = if ai == 1 { pi } else { 1.0 - pi };
                if q < trim.0 || q > trim.1 {
                    h += 1;
                }
                observed_arm_probability(pi, ai, trim)
            })
            .collect();
        observed.push(obs);
        hits.push(h);
    }
    Ok((observed, hits))
}

/// Weighted least squares of `Y_T` on `(1, A_1, ..., A_T)`.
pub fn msm_with_weights(ds: &LongitudinalDataset, outcome: usize, weights: &[f64]) -> Result<Vec<f64>> {
    check_outcome(ds, outcome)?;
    let n = ds.n_subjects();
    let n_t = ds.n_timepoints();
    if weights.len() != n {
        return Err(Error::Dimension("one weight per subject is required".into()));
    }
    let a = DMatrix::from_fn(n, n_t, |i, t| ds.exposure(t + 1)[i] as f64);
    let x = with_intercept_column(&a);
    let mut xw = x.clone();
    for (i, w) in weights.iter().enumerate() {
        xw.row_mut(i).scale_mut(*w);
    }
    let y = DVector::from_vec(ds.outcome(n_t, outcome));
    let (beta, _) = solve_general(&(xw.transpose() * &x), &(xw.transpose() * y))
        .map_err(|e| Error::Singular(format!("weighted MSM design is degenerate: {e}")))?;
    Ok(beta.iter().copied().collect())
}

pub fn msm_lm(ds: &LongitudinalDataset, outcome: usize, trim: (f64, f64)) -> Result<BaselineEstimate> {
    check_outcome(ds, outcome)?;
    let (observed, trim_hits) = logistic_propensities(ds, trim)?;
    let w = cumulative_weights_from(&observed, ds.n_timepoints())?;
    let theta = msm_with_weights(ds, outcome, &w)?;
    Ok(BaselineEstimate {
        method: BaselineMethod::MsmLm,
        ate: theta[1..].iter().sum(),
        theta: Some(theta),
        regime_means: None,
        weights: Some(WeightSummary {
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            median: quantile(&w, 0.5),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: w.iter().sum::<f64>() / w.len() as f64,
            trim_hits,
        }),
        bootstrap: None,
    })
}

/// ICE recursion with ordinary least squares at every step on the full
/// sample. Counterfactual columns are predicted by overriding the current
/// exposure, past exposures left as observed.
pub fn ice_lm_columns(ds: &LongitudinalDataset, outcome: usize) -> Result<Vec<Vec<f64>>> {
    check_outcome(ds, outcome)?;
    let n_t = ds.n_timepoints();
    let spec = LearnerSpec::new(LearnerKind::Linear);
    let mut next: Vec<Vec<f64>> = vec![ds.outcome(n_t, outcome)];
    for t in (1..=n_t).rev() {
        let hist = build_history(ds, t, true)?;
        let x0 = hist.with_exposure(t, 0)?;
        let x1 = hist.with_exposure(t, 1)?;
        let n_future = next.len();
        let mut cols = vec![Vec::new(); 2 * n_future];
        for (s, target) in next.iter().enumerate() {
            let m = fit_learner(&spec, Task::Regression, &hist.matrix, target)?;
            cols[s] = m.predict(&x0)?;
            cols[n_future + s] = m.predict(&x1)?;
        }
        next = cols;
    }
    Ok(next)
}

pub fn ice_lm(ds: &LongitudinalDataset, outcome: usize) -> Result<BaselineEstimate> {
    let cols = ice_lm_columns(ds, outcome)?;
    let means: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let regimes = enumerate_regimes(ds.n_timepoints());
    let all1 = regimes.iter().position(|r| r.is_all(1)).unwrap();
    let all0 = regimes.iter().position(|r| r.is_all(0)).unwrap();
    Ok(BaselineEstimate {
        method: BaselineMethod::IceLm,
        ate: means[all1] - means[all0],
        theta: None,
        regime_means: Some(means),
        weights: None,
        bootstrap: None,
    })
}

pub fn run_baseline(method: BaselineMethod, ds: &LongitudinalDataset, outcome: usize, trim: (f64, f64)) -> Result<BaselineEstimate> {
    match method {
        BaselineMethod::MsmLm => msm_lm(ds, outcome, trim),
        BaselineMethod::IceLm => ice_lm(ds, outcome),
    }
}

/// Runs a baseline and attaches its subject-level bootstrap SE and
/// percentile interval.
pub fn with_bootstrap(
    method: BaselineMethod,
    ds: &LongitudinalDataset,
    outcome: usize,
    trim: (f64, f64),
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<BaselineEstimate> {
    let mut est = run_baseline(method, ds, outcome, trim)?;
    est.bootstrap = Some(bootstrap_se(
        |d| run_baseline(method, d, outcome, trim).map(|e| e.ate),
        ds,
        b,
        alpha,
        seed,
    )?);
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Linear two-timepoint DGP with logistic propensities.
    fn linear_dataset(n: usize, seed: u64, effect: (f64, f64), confounded: bool) -> LongitudinalDataset {
        let mut rng = rng_from(seed, &[]);
        let mut a1 = Vec::new();
        let mut a2 = Vec::new();
        let mut z1 = Vec::new();
        let mut z2 = Vec::new();
        let mut y1 = Vec::new();
        let mut y2 = Vec::new();
        let c = if confounded { 1.0 } else { 0.0 };
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let p1 = crate::numeric::sigmoid(0.8 * c * z);
            let a: u8 = (rng.gen::<f64>() < p1) as u8;
            let w: f64 = 0.5 * z + 0.4 * a as f64 + rng.sample::<f64, _>(StandardNormal);
            let p2 = crate::numeric::sigmoid(c * (0.6 * w - 0.3 * a as f64));
            let b: u8 = (rng.gen::<f64>() < p2) as u8;
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            a1.push(a);
            a2.push(b);
            z1.push(z);
            z2.push(w);
            y1.push(z + e1);
            y2.push(1.0 + effect.0 * a as f64 + effect.1 * b as f64 + 2.0 * c * z + 1.5 * c * w + e2);
        }
        LongitudinalDataset::new(
            vec![a1, a2],
            vec![DMatrix::from_vec(n, 1, z1), DMatrix::from_vec(n, 1, z2)],
            vec![DMatrix::from_vec(n, 1, y1), DMatrix::from_vec(n, 1, y2)],
            None,
        )
        .unwrap()
    }

    #[test]
    fn unit_weights_give_plain_ols() {
        let ds = linear_dataset(300, 1, (1.0, 2.0), true);
        let theta = msm_with_weights(&ds, 1, &vec![1.0; 300]).unwrap();
        let x = with_intercept_column(&DMatrix::from_fn(300, 2, |i, t| ds.exposure(t + 1)[i] as f64));
        let y = DVector::from_vec(ds.outcome(2, 1));
        let ols = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
        for k in 0..3 {
            assert!((theta[k] - ols[k]).abs() < 1e-10);
        }
        let const_w = msm_with_weights(&ds, 1, &vec![4.0; 300]).unwrap();
        for k in 0..3 {
            assert!((const_w[k] - ols[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn well_specified_baselines_are_nearly_unbiased() {
        // Effect (1, 2): the all-ones vs all-zeros contrast is 3 plus the
        // mediated path 1.5 * 0.4 through Z_2.
        let truth = 3.0 + 1.5 * 0.4;
        let ds = linear_dataset(4000, 2, (1.0, 2.0), true);
        let ice = ice_lm(&ds, 1).unwrap();
        assert!((ice.ate - truth).abs() < 0.05 * truth, "ice {}", ice.ate);
        let msm = msm_lm(&ds, 1, (0.01, 0.99)).unwrap();
        assert!((msm.ate - truth).abs() < 0.05 * truth, "msm {}", msm.ate);
    }

    #[test]
    fn null_effect_gives_zero_ate() {
        let ds = linear_dataset(4000, 3, (0.0, 0.0), false);
        let ice = ice_lm(&ds, 1).unwrap();
        assert!(ice.ate.abs() < 0.15, "{}", ice.ate);
        assert_eq!(ice.regime_means.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn bootstrap_is_attached() {
        let ds = linear_dataset(200, 4, (1.0, 1.0), true);
        let est = with_bootstrap(BaselineMethod::IceLm, &ds, 1, (0.01, 0.99), 100, 0.05, 5).unwrap();
        let se = est.se().unwrap();
        assert!(se > 0.0 && se < 1.0);
        let (lo, hi) = est.ci().unwrap();
        assert!(lo < est.ate && est.ate < hi);
    }
}

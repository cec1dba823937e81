//! Cross-fitted nuisance estimation: time-varying propensity scores and the
//! backward iterative conditional expectation (ICE) recursion.
//!
//! Every stack is fit with base learners on one fold and the meta model on
//! the other fold, whose subjects it then predicts. So each subject's
//! nuisance values come from base learners that never saw that subject.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_history, Fold, FoldSplit, LongitudinalDataset, TreatmentRegime};
use crate::ensemble::{fit_stacked_tuned, tune_bases, Rows, StackConfig, StackedEnsemble};
use crate::error::{Error, Result};
use crate::learners::{default_grids, LearnerSpec, Task};
use crate::numeric::{derive_seed, mix64};

pub const DEFAULT_TRIM: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    /// Candidate grids for the propensity stacks, one per base learner.
    pub ps_grids: Vec<Vec<LearnerSpec>>,
    /// Candidate grids for the ICE stacks.
    pub outcome_grids: Vec<Vec<LearnerSpec>>,
    pub stack: StackConfig,
    /// Bounds applied to each observed-arm propensity before weighting.
    pub trim: (f64, f64),
    /// Re-tune base learners for every ICE suffix regression instead of once
    /// per (timepoint, fold).
    pub retune_per_suffix: bool,
    pub seed: u64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            ps_grids: default_grids(Task::Classification),
            outcome_grids: default_grids(Task::Regression),
            stack: StackConfig::default(),
            trim: DEFAULT_TRIM,
            retune_per_suffix: false,
            seed: 0,
        }
    }
}

impl NuisanceConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.trim;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "trim bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        if self.stack.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be >= 2".into()));
        }
        for g in self.ps_grids.iter().chain(&self.outcome_grids) {
            for s in g {
                s.validate()?;
            }
        }
        Ok(())
    }
}

/// A pair of objects indexed by which fold trained the base learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPair<T> {
    pub a_trains: T,
    pub b_trains: T,
}

impl<T> FoldPair<T> {
    pub fn get(&self, base_fold: Fold) -> &T {
        match base_fold {
            Fold::A => &self.a_trains,
            Fold::B => &self.b_trains,
        }
    }
}

/// Fold bookkeeping shared by a propensity fit and an ICE stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold_seed: u64,
    /// Hash of the fold assignment.
    pub signature: u64,
    /// Per subject, the fold whose rows trained the base learners that
    /// produced the subject's nuisance values.
    pub base_fold: Vec<Fold>,
}

impl Provenance {
    pub fn from_folds(folds: &FoldSplit) -> Self {
        let mut h = mix64(folds.n_subjects() as u64);
        for &i in &folds.fold_b {
            h = mix64(h ^ i as u64);
        }
        Provenance {
            fold_seed: folds.seed,
            signature: h,
            base_fold: folds.membership().into_iter().map(Fold::opposite).collect(),
        }
    }

    /// True when no subject's values came from base learners trained on
    /// the subject's own fold.
    pub fn is_cross_fitted(&self, folds: &FoldSplit) -> bool {
        folds
            .membership()
            .iter()
            .zip(&self.base_fold)
            .all(|(own, base)| own != base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub trim: (f64, f64),
    /// Predicted P(A_t = 1 | history), indexed `[t - 1][subject]`.
    pub raw: Vec<Vec<f64>>,
    /// Trimmed probability of the observed exposure, indexed `[t - 1][subject]`.
    pub observed: Vec<Vec<f64>>,
    /// Per timepoint, subjects whose raw observed-arm probability fell
    /// outside the trim bounds.
    pub trim_hits: Vec<usize>,
    pub stacks: Vec<FoldPair<StackedEnsemble>>,
    pub provenance: Provenance,
}

/// Probability of the observed arm, clamped to the trim bounds.
pub fn observed_arm_probability(p: f64, a: u8, trim: (f64, f64)) -> f64 {
    let q = if a == 1 { p } else { 1.0 - p };
    q.clamp(trim.0, trim.1)
}

fn check_folds(ds: &LongitudinalDataset, folds: &FoldSplit) -> Result<()> {
    if folds.n_subjects() != ds.n_subjects() {
        return Err(Error::Dimension(format!(
            "fold split covers {} subjects but the dataset has {}",
            folds.n_subjects(),
            ds.n_subjects()
        )));
    }
    if folds.fold_a.is_empty() || folds.fold_b.is_empty() {
        return Err(Error::Validation("both folds must be non-empty".into()));
    }
    Ok(())
}

fn rows_of(x: &DMatrix<f64>, y: &[f64], ids: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
    (x.select_rows(ids), ids.iter().map(|&i| y[i]).collect())
}

const FOLDS: [Fold; 2] = [Fold::A, Fold::B];

pub fn fit_propensity(ds: &LongitudinalDataset, folds: &FoldSplit, cfg: &NuisanceConfig) -> Result<PropensityFit> {
    cfg.validate()?;
    check_folds(ds, folds)?;
    let n = ds.n_subjects();
    let n_t = ds.n_timepoints();
    let jobs: Vec<(usize, Fold)> = (1..=n_t).flat_map(|t| FOLDS.map(|f| (t, f))).collect();
    let histories: Vec<DMatrix<f64>> = (1..=n_t)
        .map(|t| build_history(ds, t, false).map(|h| h.matrix))
        .collect::<Result<_>>()?;
    let fitted: Vec<(StackedEnsemble, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(t, base)| {
            let x = &histories[t - 1];
            let y: Vec<f64> = ds.exposure(t).iter().map(|&a| a as f64).collect();
            let train_ids = folds.rows(base);
            let meta_ids = folds.rows(base.opposite());
            let (xt, yt) = rows_of(x, &y, train_ids);
            let (xm, ym) = rows_of(x, &y, meta_ids);
            let seed = derive_seed(cfg.seed, &[0x95, t as u64, base as u64]);
            let specs = tune_bases(&cfg.ps_grids, Task::Classification, &xt, &yt, &cfg.stack, seed)?;
            let stack = fit_stacked_tuned(
                &specs,
                Task::Classification,
                Rows { x: &xt, y: &yt, ids: train_ids },
                Rows { x: &xm, y: &ym, ids: meta_ids },
                &cfg.stack,
            )?;
            let p = stack.predict(&xm)?;
            Ok((stack, p))
        })
        .collect::<Result<_>>()?;

    let mut raw = vec![vec![0.0; n]; n_t];
    let mut stacks = Vec::with_capacity(n_t);
    let mut it = jobs.iter().zip(fitted);
    for t in 1..=n_t {
        let mut pair = Vec::with_capacity(2);
        for _ in 0..2 {
            let (&(_, base), (stack, p)) = it.next().expect("one job per (t, fold)");
            for (&i, v) in folds.rows(base.opposite()).iter().zip(p) {
                raw[t - 1][i] = v;
            }
            pair.push(stack);
        }
        let b = pair.pop().unwrap();
        let a = pair.pop().unwrap();
        stacks.push(FoldPair { a_trains: a, b_trains: b });
    }
    let (lo, hi) = cfg.trim;
    let mut observed = vec![vec![0.0; n]; n_t];
    let mut trim_hits = vec![0; n_t];
    for t in 1..=n_t {
        for (i, &a) in ds.exposure(t).iter().enumerate() {
            let p = raw[t - 1][i];
            let q = if a == 1 { p } else { 1.0 - p };
            if q < lo || q > hi {
                trim_hits[t - 1] += 1;
            }
            observed[t - 1][i] = observed_arm_probability(p, a, cfg.trim);
        }
    }
    Ok(PropensityFit {
        trim: cfg.trim,
        raw,
        observed,
        trim_hits,
        stacks,
        provenance: Provenance::from_folds(folds),
    })
}

/// Per subject, the product over k <= upto of the inverse observed-arm
/// probabilities.
pub fn cumulative_weights_from(observed: &[Vec<f64>], upto: usize) -> Result<Vec<f64>> {
    if upto == 0 || upto > observed.len() {
        return Err(Error::Validation(format!(
            "weight horizon {upto} out of range 1..={}",
            observed.len()
        )));
    }
    let n = observed[0].len();
    Ok((0..n)
        .map(|i| observed[..upto].iter().map(|p| 1.0 / p[i]).product())
        .collect())
}

pub fn cumulative_weights(pf: &PropensityFit, upto: usize) -> Result<Vec<f64>> {
    cumulative_weights_from(&pf.observed, upto)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IceStack {
    /// Outcome index j (1-based).
    pub outcome: usize,
    pub n_timepoints: usize,
    /// Counterfactual means indexed `[t - 1][suffix][subject]`, where the
    /// suffix (a_t, ..., a_T) is indexed lexicographically with a_t as the
    /// most significant bit.
    pub eta: Vec<Vec<Vec<f64>>>,
    /// Stacks at step t, one per future suffix (a_{t+1}, ..., a_T); the
    /// step-T entry has a single stack fit on the observed outcome.
    pub stacks: Vec<Vec<FoldPair<StackedEnsemble>>>,
    pub provenance: Provenance,
}

pub fn fit_ice(ds: &LongitudinalDataset, folds: &FoldSplit, cfg: &NuisanceConfig, outcome: usize) -> Result<IceStack> {
    cfg.validate()?;
    check_folds(ds, folds)?;
    if outcome == 0 || outcome > ds.n_outcomes() {
        return Err(Error::Validation(format!(
            "outcome index {outcome} out of range 1..={}",
            ds.n_outcomes()
        )));
    }
    let n = ds.n_subjects();
    let n_t = ds.n_timepoints();
    let mut eta: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_t];
    let mut stacks: Vec<Vec<FoldPair<StackedEnsemble>>> = vec![Vec::new(); n_t];
    for t in (1..=n_t).rev() {
        let hist = build_history(ds, t, true)?;
        let x_obs = &hist.matrix;
        let x0 = hist.with_exposure(t, 0)?;
        let x1 = hist.with_exposure(t, 1)?;
        let n_future = 1usize << (n_t - t);
        let targets: Vec<Vec<f64>> = if t == n_t {
            vec![ds.outcome(n_t, outcome)]
        } else {
            eta[t].clone()
        };
        debug_assert_eq!(targets.len(), n_future);
        let seed_of = |base: Fold, s: usize| derive_seed(cfg.seed, &[0x1ce, outcome as u64, t as u64, base as u64, s as u64]);
        let tuned: Vec<Vec<LearnerSpec>> = if cfg.retune_per_suffix {
            Vec::new()
        } else {
            FOLDS
                .par_iter()
                .map(|&base| {
                    let (xt, yt) = rows_of(x_obs, &targets[0], folds.rows(base));
                    tune_bases(&cfg.outcome_grids, Task::Regression, &xt, &yt, &cfg.stack, seed_of(base, 0))
                })
                .collect::<Result<_>>()?
        };
        let jobs: Vec<(usize, Fold)> = (0..n_future).flat_map(|s| FOLDS.map(|f| (s, f))).collect();
        let fitted: Vec<(StackedEnsemble, Vec<f64>, Vec<f64>)> = jobs
            .par_iter()
            .map(|&(s, base)| {
                let train_ids = folds.rows(base);
                let meta_ids = folds.rows(base.opposite());
                let (xt, yt) = rows_of(x_obs, &targets[s], train_ids);
                let (xm, ym) = rows_of(x_obs, &targets[s], meta_ids);
                let specs = if cfg.retune_per_suffix {
                    tune_bases(&cfg.outcome_grids, Task::Regression, &xt, &yt, &cfg.stack, seed_of(base, s))?
                } else {
                    tuned[base as usize].clone()
                };
                let stack = fit_stacked_tuned(
                    &specs,
                    Task::Regression,
                    Rows { x: &xt, y: &yt, ids: train_ids },
                    Rows { x: &xm, y: &ym, ids: meta_ids },
                    &cfg.stack,
                )?;
                let p0 = stack.predict(&x0.select_rows(meta_ids))?;
                let p1 = stack.predict(&x1.select_rows(meta_ids))?;
                Ok((stack, p0, p1))
            })
            .collect::<Result<_>>()?;
        let mut cols = vec![vec![0.0; n]; 2 * n_future];
        let mut step_stacks = Vec::with_capacity(n_future);
        let mut pending: Option<StackedEnsemble> = None;
        for (&(s, base), (stack, p0, p1)) in jobs.iter().zip(fitted) {
            for (k, &i) in folds.rows(base.opposite()).iter().enumerate() {
                cols[s][i] = p0[k];
                cols[n_future + s][i] = p1[k];
            }
            match pending.take() {
                None => pending = Some(stack),
                Some(a) => step_stacks.push(FoldPair { a_trains: a, b_trains: stack }),
            }
        }
        eta[t - 1] = cols;
        stacks[t - 1] = step_stacks;
    }
    Ok(IceStack {
        outcome,
        n_timepoints: n_t,
        eta,
        stacks,
        provenance: Provenance::from_folds(folds),
    })
}

/// Stored counterfactual means at step t for a suffix (a_t, ..., a_T).
pub fn eta_lookup(stack: &IceStack, t: usize, suffix: &TreatmentRegime, subjects: &[usize]) -> Result<Vec<f64>> {
    if t == 0 || t > stack.n_timepoints {
        return Err(Error::Validation(format!("timepoint {t} out of range")));
    }
    if suffix.start() != t || suffix.len() != stack.n_timepoints - t + 1 {
        return Err(Error::Validation(format!(
            "step {t} needs a suffix of length {} starting at {t}, got {suffix}",
            stack.n_timepoints - t + 1
        )));
    }
    let col = &stack.eta[t - 1][suffix.index()];
    subjects
        .iter()
        .map(|&i| {
            col.get(i)
                .copied()
                .ok_or_else(|| Error::Validation(format!("subject {i} out of range")))
        })
        .collect()
}

/// Plain nuisance values consumed by the score: observed-arm propensities
/// and ICE columns, optionally tagged with their fold provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceValues {
    /// `[t - 1][subject]`, already trimmed.
    pub observed_arm: Vec<Vec<f64>>,
    /// `[t - 1][suffix][subject]`, as in [`IceStack::eta`].
    pub eta: Vec<Vec<Vec<f64>>>,
    pub provenance: Option<Provenance>,
}

impl NuisanceValues {
    pub fn new(observed_arm: Vec<Vec<f64>>, eta: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let v = NuisanceValues {
            observed_arm,
            eta,
            provenance: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_fits(pf: &PropensityFit, ice: &IceStack) -> Result<Self> {
        if pf.provenance != ice.provenance {
            return Err(Error::Validation(
                "propensity and ICE nuisances were fit on different fold splits".into(),
            ));
        }
        let v = NuisanceValues {
            observed_arm: pf.observed.clone(),
            eta: ice.eta.clone(),
            provenance: Some(pf.provenance.clone()),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn n_timepoints(&self) -> usize {
        self.observed_arm.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.observed_arm.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n_t = self.observed_arm.len();
        if n_t == 0 || self.eta.len() != n_t {
            return Err(Error::Dimension(format!(
                "nuisances cover {} propensity and {} ICE timepoints",
                n_t,
                self.eta.len()
            )));
        }
        let n = self.n_subjects();
        for (t, p) in self.observed_arm.iter().enumerate() {
            if p.len() != n {
                return Err(Error::Dimension(format!("propensity row {} has wrong length", t + 1)));
            }
            if p.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(Error::Positivity(format!(
                    "observed-arm propensity at t={} outside (0, 1]",
                    t + 1
                )));
            }
        }
        for (t, cols) in self.eta.iter().enumerate() {
            if cols.len() != 1 << (n_t - t) {
                return Err(Error::Dimension(format!(
                    "step {} needs {} ICE columns, got {}",
                    t + 1,
                    1usize << (n_t - t),
                    cols.len()
                )));
            }
            if cols.iter().any(|c| c.len() != n || c.iter().any(|v| !v.is_finite())) {
                return Err(Error::Dimension(format!("ICE column at step {} is malformed", t + 1)));
            }
        }
        Ok(())
    }
}

/// Writes one row per subject: fold, raw and trimmed propensities,
/// cumulative weights and every ICE column.
pub fn write_diagnostics<W: Write>(
    ds: &LongitudinalDataset,
    folds: &FoldSplit,
    pf: &PropensityFit,
    ice: &IceStack,
    out: W,
) -> Result<()> {
    let n_t = ds.n_timepoints();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject".to_string(), "fold".to_string()];
    for t in 1..=n_t {
        header.push(format!("ps_raw_{t}"));
        header.push(format!("ps_observed_{t}"));
        header.push(format!("weight_{t}"));
    }
    for t in 1..=n_t {
        for s in 0..(1usize << (n_t - t + 1)) {
            let suffix = TreatmentRegime::from_index(t, n_t - t + 1, s);
            let tag: String = suffix.values().iter().map(|a| a.to_string()).collect();
            header.push(format!("eta_{t}_{tag}"));
        }
    }
    w.write_record(&header)?;
    let weights: Vec<Vec<f64>> = (1..=n_t).map(|t| cumulative_weights(pf, t)).collect::<Result<_>>()?;
    let membership = folds.membership();
    for i in 0..ds.n_subjects() {
        let mut rec = vec![i.to_string(), format!("{:?}", membership[i])];
        for t in 0..n_t {
            rec.push(pf.raw[t][i].to_string());
            rec.push(pf.observed[t][i].to_string());
            rec.push(weights[t][i].to_string());
        }
        for cols in &ice.eta {
            for c in cols {
                rec.push(c[i].to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("diagnostics", e))?;
    Ok(())
}

#[cfg(test)]
mod tests;

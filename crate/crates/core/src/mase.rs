//! End-to-end MASE estimation: fold split, cross-fitted propensity and ICE
//! stacks, the pooled doubly robust solve and its sandwich interval.

use serde::{Deserialize, Serialize};

use crate::dataset::{split_folds, FoldSplit, LongitudinalDataset};
use crate::error::Result;
use crate::estimator::{crossfit_estimate, LinearMsm, ScoreSet, ThetaEstimate};
use crate::inference::{sandwich, SandwichResult};
use crate::nuisance::{cumulative_weights, fit_ice, fit_propensity, IceStack, NuisanceConfig, PropensityFit};
use crate::numeric::{derive_seed, quantile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaseConfig {
    pub nuisance: NuisanceConfig,
    /// Seed for the two-fold subject split.
    pub fold_seed: u64,
    pub alpha: f64,
}

impl Default for MaseConfig {
    fn default() -> Self {
        MaseConfig {
            nuisance: NuisanceConfig::default(),
            fold_seed: 0,
            alpha: 0.05,
        }
    }
}

impl MaseConfig {
    /// Copy with both the fold and learner seeds derived from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.fold_seed = derive_seed(seed, &[0xf0]);
        c.nuisance.seed = derive_seed(seed, &[0x5e]);
        c
    }
}

/// Per-timepoint propensity summary for positivity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub t: usize,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    pub trim_hits: usize,
    pub max_cumulative_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    /// Some stack had nearly collinear base predictions.
    pub collinear_meta: bool,
    /// Some stack saw a constant classification target.
    pub degenerate_propensity: bool,
    /// The ATE variance quadratic form was clamped at 0.
    pub negative_variance: bool,
    pub cross_fitted: bool,
}

impl Flags {
    pub fn clean(&self) -> bool {
        !self.degenerate_propensity && !self.negative_variance && self.cross_fitted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaseResult {
    pub outcome: usize,
    pub estimate: ThetaEstimate,
    pub sandwich: SandwichResult,
    pub propensity: Vec<PropensitySummary>,
    pub flags: Flags,
    pub fold_seed: u64,
    pub learner_seed: u64,
}

/// Fitted pieces kept for diagnostics.
pub struct MaseFit {
    pub result: MaseResult,
    pub folds: FoldSplit,
    pub propensity: PropensityFit,
    pub ice: IceStack,
    pub scores: ScoreSet,
}

pub fn summarize_propensity(pf: &PropensityFit) -> Result<Vec<PropensitySummary>> {
    (1..=pf.raw.len())
        .map(|t| {
            let raw = &pf.raw[t - 1];
            let w = cumulative_weights(pf, t)?;
            Ok(PropensitySummary {
                t,
                min: raw.iter().copied().fold(f64::INFINITY, f64::min),
                q05: quantile(raw, 0.05),
                median: quantile(raw, 0.5),
                q95: quantile(raw, 0.95),
                max: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                trim_hits: pf.trim_hits[t - 1],
                max_cumulative_weight: w.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Runs the full pipeline for several outcomes sharing one propensity fit.
pub fn fit_mase_outcomes(ds: &LongitudinalDataset, outcomes: &[usize], cfg: &MaseConfig) -> Result<Vec<MaseFit>> {
    let folds = split_folds(ds, cfg.fold_seed)?;
    let pf = fit_propensity(ds, &folds, &cfg.nuisance)?;
    let summary = summarize_propensity(&pf)?;
    let msm = LinearMsm::new(ds.n_timepoints());
    outcomes
        .iter()
        .map(|&j| {
            let ice = fit_ice(ds, &folds, &cfg.nuisance, j)?;
            let (estimate, scores) = crossfit_estimate(ds, &folds, &pf, &ice, &msm)?;
            let sw = sandwich(&scores, &msm.jacobian(), cfg.alpha)?;
            let collinear_meta = pf
                .stacks
                .iter()
                .flat_map(|p| [&p.a_trains, &p.b_trains])
                .chain(ice.stacks.iter().flatten().flat_map(|p| [&p.a_trains, &p.b_trains]))
                .any(|s| s.collinear);
            let degenerate_propensity = pf
                .stacks
                .iter()
                .any(|p| p.a_trains.degenerate || p.b_trains.degenerate);
            let flags = Flags {
                collinear_meta,
                degenerate_propensity,
                negative_variance: sw.negative_variance,
                cross_fitted: pf.provenance.is_cross_fitted(&folds),
            };
            Ok(MaseFit {
                result: MaseResult {
                    outcome: j,
                    estimate,
                    sandwich: sw,
                    propensity: summary.clone(),
                    flags,
                    fold_seed: cfg.fold_seed,
                    learner_seed: cfg.nuisance.seed,
                },
                folds: folds.clone(),
                propensity: pf.clone(),
                ice,
                scores,
            })
        })
        .collect()
}

pub fn run_mase(ds: &LongitudinalDataset, outcome: usize, cfg: &MaseConfig) -> Result<MaseResult> {
    Ok(fit_mase_outcomes(ds, &[outcome], cfg)?.remove(0).result)
}

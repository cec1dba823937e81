//! Estimation reports written by `estimate`.

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineEstimate;
use crate::config::RunConfig;
use crate::estimator::ThetaEstimate;
use crate::mase::{Flags, MaseResult, PropensitySummary};
use crate::simulation::{fmt_sig, Method};

pub const SOFTWARE: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub path: Option<String>,
    pub n_subjects: usize,
    pub n_timepoints: usize,
    pub n_outcomes: usize,
}

/// One (outcome, method) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub ate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// MSM coefficients when the method estimates them.
    pub theta: Option<Vec<f64>>,
    pub solver: Option<ThetaEstimate>,
    pub flags: Option<Flags>,
}

impl MethodRow {
    pub fn from_mase(r: &MaseResult) -> Self {
        MethodRow {
            method: Method::Mase,
            ate: r.estimate.ate,
            se: Some(r.sandwich.se_ate),
            ci: Some(r.sandwich.ci),
            theta: Some(r.estimate.theta.clone()),
            solver: Some(r.estimate.clone()),
            flags: Some(r.flags.clone()),
        }
    }

    pub fn from_baseline(method: Method, b: &BaselineEstimate) -> Self {
        MethodRow {
            method,
            ate: b.ate,
            se: b.se(),
            ci: b.ci(),
            theta: b.theta.clone(),
            solver: None,
            flags: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub outcome: usize,
    pub name: String,
    pub methods: Vec<MethodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub software: String,
    pub version: String,
    pub config_hash: String,
    /// The resolved configuration, sufficient to rerun the analysis.
    pub config: RunConfig,
    pub fold_seed: u64,
    pub learner_seed: u64,
    pub dataset: DatasetSummary,
    /// Per-timepoint propensity summaries from the MASE fit, if it ran.
    pub propensity: Option<Vec<PropensitySummary>>,
    pub outcomes: Vec<OutcomeReport>,
}

pub const ESTIMATE_HEADER: [&str; 7] = ["outcome", "name", "method", "ate", "se", "ci_lower", "ci_upper"];

impl EstimateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ESTIMATE_HEADER).expect("in-memory write");
        for o in &self.outcomes {
            for m in &o.methods {
                let (lo, hi) = m.ci.unwrap_or((f64::NAN, f64::NAN));
                w.write_record([
                    o.outcome.to_string(),
                    o.name.clone(),
                    m.method.name().to_string(),
                    fmt_sig(m.ate),
                    fmt_sig(m.se.unwrap_or(f64::NAN)),
                    fmt_sig(lo),
                    fmt_sig(hi),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

//! Synthetic longitudinal data with known counterfactuals, oracle truths and
//! the Monte Carlo driver used for benchmarking.
//!
//! Confounders at each timepoint are `Z_t ~ N(0, Σ)` with AR(1) correlation
//! across the p coordinates, linked over time by
//! `Z_t = φ Z_{t-1} + sqrt(1 - φ²) ε_t` so the marginal law is unchanged.
//! A score function `s(Z)` combines a linear term on coordinates 1..5,
//! centred cosines `cos(Z_k) - e^{-1/2}` on coordinates 6..10 and the
//! products `Z_1 Z_6`, `Z_2 Z_7`, `Z_3 Z_8`.
//!
//! * `logit π_t = c_π + s_π(Z_t) + λ_A A_{t-1} + λ_Y ε_{t-1}`, where
//!   `ε_{t-1}` is the standardized outcome noise of the first outcome.
//! * `Y_t(ā) = b_0 + Σ_{s≤t} [β_s a_s + m a_s cos(Z_{s,6}) + s_Y(Z_s)] + σ ε_t`,
//!   with `ε_t = ω ε_{t-1} + sqrt(1 - ω²) ν_t` shared across regimes.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use nalgebra::DMatrix;
use once_cell::sync::Lazy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{run_baseline, with_bootstrap, BaselineMethod};
use crate::dataset::{LongitudinalDataset, TreatmentRegime};
use crate::error::{Error, Result};
use crate::mase::{run_mase, MaseConfig};
use crate::nuisance::NuisanceValues;
use crate::numeric::{derive_seed, mean, pairwise_sum, rng_from, sample_sd, sigmoid};

const COS_MEAN: f64 = 0.606_530_659_712_633_4;
const N_LINEAR: usize = 5;
const N_COSINE: usize = 5;
const INTERACTIONS: [(usize, usize); 3] = [(0, 5), (1, 6), (2, 7)];
/// Smallest p that holds every term of the score functions.
pub const MIN_CONFOUNDERS: usize = N_LINEAR + N_COSINE;
pub const MIN_ORACLE: usize = 100_000;

/// Coefficients of one score function `s(Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreCoefficients {
    pub linear: [f64; N_LINEAR],
    pub cosine: [f64; N_COSINE],
    pub interaction: [f64; 3],
}

impl ScoreCoefficients {
    pub fn zero() -> Self {
        ScoreCoefficients {
            linear: [0.0; N_LINEAR],
            cosine: [0.0; N_COSINE],
            interaction: [0.0; 3],
        }
    }

    fn eval(&self, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..N_LINEAR {
            s += self.linear[k] * z[k];
        }
        for k in 0..N_COSINE {
            s += self.cosine[k] * (z[N_LINEAR + k].cos() - COS_MEAN);
        }
        for (c, &(a, b)) in self.interaction.iter().zip(&INTERACTIONS) {
            s += c * z[a] * z[b];
        }
        s
    }

    fn is_finite(&self) -> bool {
        self.linear.iter().chain(&self.cosine).chain(&self.interaction).all(|v| v.is_finite())
    }

    fn without_nonlinear(&self) -> Self {
        ScoreCoefficients {
            linear: self.linear,
            cosine: [0.0; N_COSINE],
            interaction: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub n_timepoints: usize,
    /// Confounders per timepoint.
    pub p: usize,
    /// Number of outcomes; each gets independent noise.
    pub n_outcomes: usize,
    /// AR(1) correlation across confounder coordinates.
    pub rho: f64,
    /// Correlation of each confounder with itself at the previous timepoint.
    pub persistence: f64,
    pub outcome_sd: f64,
    /// Autocorrelation of the outcome noise across timepoints.
    pub noise_carryover: f64,
    pub intercept: f64,
    /// Total effect of the always-exposed regime, split equally across
    /// timepoints unless `effects` is given.
    pub effect_size: f64,
    pub effects: Option<Vec<f64>>,
    /// Effect modification coefficient `m`.
    pub modifier: f64,
    pub ps_intercept: f64,
    pub ps: ScoreCoefficients,
    pub ps_lag_exposure: f64,
    pub ps_lag_noise: f64,
    pub outcome: ScoreCoefficients,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n: 1000,
            n_timepoints: 2,
            p: 50,
            n_outcomes: 1,
            rho: 0.5,
            persistence: 0.5,
            outcome_sd: 1.0,
            noise_carryover: 0.5,
            intercept: 1.0,
            effect_size: 5.0,
            effects: None,
            modifier: 0.1,
            ps_intercept: 0.0,
            ps: ScoreCoefficients {
                linear: [0.3, -0.3, 0.2, 0.2, -0.2],
                cosine: [1.2, 1.2, 1.2, 1.2, 1.2],
                interaction: [0.3, -0.3, 0.3],
            },
            ps_lag_exposure: 0.4,
            ps_lag_noise: 0.3,
            outcome: ScoreCoefficients {
                linear: [0.5, 0.5, -0.5, 0.5, 0.5],
                cosine: [0.3, 0.3, 0.3, 0.3, 0.3],
                interaction: [0.2, 0.2, -0.2],
            },
        }
    }
}

impl DgpSpec {
    /// The default spec with every nonlinear term removed.
    pub fn linear() -> Self {
        let d = DgpSpec::default();
        DgpSpec {
            modifier: 0.0,
            ps: d.ps.without_nonlinear(),
            outcome: d.outcome.without_nonlinear(),
            ..d
        }
    }

    pub fn effects(&self) -> Vec<f64> {
        match &self.effects {
            Some(e) => e.clone(),
            None => vec![self.effect_size / self.n_timepoints as f64; self.n_timepoints],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n < 4 {
            return bad(format!("n must be at least 4, got {}", self.n));
        }
        if self.n_timepoints == 0 || self.n_timepoints > 16 {
            return bad(format!("n_timepoints must be in 1..=16, got {}", self.n_timepoints));
        }
        if self.p < MIN_CONFOUNDERS {
            return bad(format!("p must be at least {MIN_CONFOUNDERS}, got {}", self.p));
        }
        if self.n_outcomes == 0 {
            return bad("n_outcomes must be positive".into());
        }
        for (name, v) in [
            ("rho", self.rho),
            ("persistence", self.persistence),
            ("noise_carryover", self.noise_carryover),
        ] {
            if !(v > -1.0 && v < 1.0) {
                return bad(format!("{name} must lie in (-1, 1), got {v}"));
            }
        }
        if !(self.outcome_sd.is_finite() && self.outcome_sd >= 0.0) {
            return bad(format!("outcome_sd must be finite and non-negative, got {}", self.outcome_sd));
        }
        if let Some(e) = &self.effects {
            if e.len() != self.n_timepoints {
                return bad(format!("{} effects for {} timepoints", e.len(), self.n_timepoints));
            }
        }
        let scalars = [
            self.intercept,
            self.effect_size,
            self.modifier,
            self.ps_intercept,
            self.ps_lag_exposure,
            self.ps_lag_noise,
        ];
        if scalars.iter().chain(self.effects().iter()).any(|v| !v.is_finite())
            || !self.ps.is_finite()
            || !self.outcome.is_finite()
        {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A generated dataset together with every counterfactual outcome.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub dataset: LongitudinalDataset,
    /// `[t - 1][j - 1]` is an n x 2^t matrix of `Y_t(a_1..a_t)` with regimes
    /// in lexicographic order, first exposure most significant.
    pub counterfactuals: Vec<Vec<DMatrix<f64>>>,
    /// True propensity of exposure at each timepoint, `[t - 1][i]`.
    pub propensity: Vec<Vec<f64>>,
}

impl SimulatedDataset {
    /// Sample mean of `Y_T(1..1) - Y_T(0..0)` for outcome j.
    pub fn sample_ate(&self, j: usize) -> f64 {
        let cf = &self.counterfactuals.last().expect("at least one timepoint")[j - 1];
        let last = cf.ncols() - 1;
        let d: Vec<f64> = (0..cf.nrows()).map(|i| cf[(i, last)] - cf[(i, 0)]).collect();
        mean(&d)
    }
}

/// Confounder draws for one subject, `[t][k]`.
fn draw_confounders(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let ar = (1.0 - spec.rho * spec.rho).sqrt();
    let carry = (1.0 - spec.persistence * spec.persistence).sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.n_timepoints);
    for t in 0..spec.n_timepoints {
        let mut e = vec![0.0; spec.p];
        for k in 0..spec.p {
            let w: f64 = rng.sample(StandardNormal);
            e[k] = if k == 0 { w } else { spec.rho * e[k - 1] + ar * w };
        }
        if t > 0 {
            for (x, prev) in e.iter_mut().zip(&out[t - 1]) {
                *x = spec.persistence * prev + carry * *x;
            }
        }
        out.push(e);
    }
    out
}

/// Standardized outcome noise `[t][j]`.
fn draw_noise(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let carry = (1.0 - spec.noise_carryover * spec.noise_carryover).sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.n_timepoints);
    for t in 0..spec.n_timepoints {
        let row: Vec<f64> = (0..spec.n_outcomes)
            .map(|j| {
                let v: f64 = rng.sample(StandardNormal);
                if t == 0 {
                    v
                } else {
                    spec.noise_carryover * out[t - 1][j] + carry * v
                }
            })
            .collect();
        out.push(row);
    }
    out
}

/// Mean of `Y_t` under exposure path `a` (length t).
fn outcome_mean(spec: &DgpSpec, beta: &[f64], z: &[Vec<f64>], a: &[u8]) -> f64 {
    let mut m = spec.intercept;
    for (s, &a_s) in a.iter().enumerate() {
        let a_s = a_s as f64;
        m += beta[s] * a_s + spec.modifier * a_s * z[s][N_LINEAR].cos() + spec.outcome.eval(&z[s]);
    }
    m
}

/// Counterfactual `Y_t` for every regime of length t, lexicographic.
fn counterfactual_row(spec: &DgpSpec, beta: &[f64], z: &[Vec<f64>], noise: &[Vec<f64>], t: usize, j: usize) -> Vec<f64> {
    (0..1usize << t)
        .map(|idx| {
            let r = TreatmentRegime::from_index(1, t, idx);
            outcome_mean(spec, beta, z, r.values()) + spec.outcome_sd * noise[t - 1][j]
        })
        .collect()
}

fn path_index(a: &[u8]) -> usize {
    a.iter().fold(0, |acc, &v| (acc << 1) | v as usize)
}

pub fn gen_dataset(spec: &DgpSpec, seed: u64) -> Result<SimulatedDataset> {
    spec.validate()?;
    let (n, n_t, q) = (spec.n, spec.n_timepoints, spec.n_outcomes);
    let beta = spec.effects();
    let mut rng = rng_from(seed, &[0xd6]);
    let mut exposures = vec![vec![0u8; n]; n_t];
    let mut propensity = vec![vec![0.0; n]; n_t];
    let mut covariates: Vec<DMatrix<f64>> = (0..n_t).map(|_| DMatrix::zeros(n, spec.p)).collect();
    let mut outcomes: Vec<DMatrix<f64>> = (0..n_t).map(|_| DMatrix::zeros(n, q)).collect();
    let mut counterfactuals: Vec<Vec<DMatrix<f64>>> = (1..=n_t)
        .map(|t| (0..q).map(|_| DMatrix::zeros(n, 1 << t)).collect())
        .collect();
    for i in 0..n {
        let z = draw_confounders(spec, &mut rng);
        let noise = draw_noise(spec, &mut rng);
        let mut path = Vec::with_capacity(n_t);
        for t in 0..n_t {
            let mut eta = spec.ps_intercept + spec.ps.eval(&z[t]);
            if t > 0 {
                eta += spec.ps_lag_exposure * path[t - 1] as f64 + spec.ps_lag_noise * noise[t - 1][0];
            }
            let pi = sigmoid(eta);
            let a = (rng.gen::<f64>() < pi) as u8;
            propensity[t][i] = pi;
            exposures[t][i] = a;
            path.push(a);
            for (k, v) in z[t].iter().enumerate() {
                covariates[t][(i, k)] = *v;
            }
        }
        for t in 1..=n_t {
            let observed = path_index(&path[..t]);
            for j in 0..q {
                let row = counterfactual_row(spec, &beta, &z, &noise, t, j);
                outcomes[t - 1][(i, j)] = row[observed];
                for (c, v) in row.into_iter().enumerate() {
                    counterfactuals[t - 1][j][(i, c)] = v;
                }
            }
        }
    }
    let dataset = LongitudinalDataset::new(exposures, covariates, outcomes, None)?;
    Ok(SimulatedDataset {
        dataset,
        counterfactuals,
        propensity,
    })
}

/// Monte Carlo oracle value of the ATE with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub value: f64,
    pub se: f64,
    pub n_oracle: usize,
}

static TRUTH_CACHE: Lazy<Mutex<HashMap<(String, usize, u64), Truth>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Mean of `Y_T(1..1) - Y_T(0..0)` for the first outcome over `n_oracle`
/// fresh subjects. Results are cached by spec hash, size and seed.
pub fn true_ate(spec: &DgpSpec, n_oracle: usize, seed: u64) -> Result<Truth> {
    spec.validate()?;
    if n_oracle < MIN_ORACLE {
        return Err(Error::InvalidSpec(format!(
            "oracle size must be at least {MIN_ORACLE}, got {n_oracle}"
        )));
    }
    let key = (spec.hash(), n_oracle, seed);
    if let Some(t) = TRUTH_CACHE.lock().expect("cache lock").get(&key) {
        return Ok(*t);
    }
    let beta = spec.effects();
    let ones = vec![1u8; spec.n_timepoints];
    let zeros = vec![0u8; spec.n_timepoints];
    const CHUNK: usize = 10_000;
    let diffs: Vec<f64> = (0..n_oracle.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = rng_from(seed, &[0x7e, c as u64]);
            let len = CHUNK.min(n_oracle - c * CHUNK);
            (0..len)
                .map(|_| {
                    let z = draw_confounders(spec, &mut rng);
                    outcome_mean(spec, &beta, &z, &ones) - outcome_mean(spec, &beta, &z, &zeros)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let truth = Truth {
        value: pairwise_sum(&diffs) / n_oracle as f64,
        se: sample_sd(&diffs) / (n_oracle as f64).sqrt(),
        n_oracle,
    };
    TRUTH_CACHE.lock().expect("cache lock").insert(key, truth);
    Ok(truth)
}

/// Two-timepoint DGP whose nuisances are known in closed form.
///
/// `Z_1 ~ N(0,1)`, `π_1 = sigmoid(0.5 Z_1)`, `Y_1 = 0.5 Z_1 + A_1 + e`,
/// `Z_2 = 0.5 Z_1 + 0.3 A_1 + N(0,1)`, `π_2 = sigmoid(0.4 Z_2 - 0.3 A_1)`,
/// `Y_2 = b_0 + b_1 A_1 + b_2 A_2 + c Z_2 + e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticDgp {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub c: f64,
}

impl Default for AnalyticDgp {
    fn default() -> Self {
        AnalyticDgp {
            b0: 1.0,
            b1: 1.0,
            b2: 2.0,
            c: 1.5,
        }
    }
}

pub struct AnalyticSample {
    pub dataset: LongitudinalDataset,
    /// True observed-arm propensities and ICE columns.
    pub truth: NuisanceValues,
    /// True MSM coefficients.
    pub theta: Vec<f64>,
}

impl AnalyticDgp {
    pub fn theta(&self) -> Vec<f64> {
        vec![self.b0, self.b1 + 0.3 * self.c, self.b2]
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<AnalyticSample> {
        let mut rng = rng_from(seed, &[0xa7]);
        let mut a = vec![vec![0u8; n]; 2];
        let mut z = vec![DMatrix::zeros(n, 1), DMatrix::zeros(n, 1)];
        let mut y = vec![DMatrix::zeros(n, 1), DMatrix::zeros(n, 1)];
        let mut observed = vec![vec![0.0; n]; 2];
        let mut eta1 = vec![vec![0.0; n]; 4];
        let mut eta2 = vec![vec![0.0; n]; 2];
        for i in 0..n {
            let z1: f64 = rng.sample(StandardNormal);
            let p1 = sigmoid(0.5 * z1);
            let a1 = (rng.gen::<f64>() < p1) as u8;
            let y1 = 0.5 * z1 + a1 as f64 + rng.sample::<f64, _>(StandardNormal);
            let z2 = 0.5 * z1 + 0.3 * a1 as f64 + rng.sample::<f64, _>(StandardNormal);
            let p2 = sigmoid(0.4 * z2 - 0.3 * a1 as f64);
            let a2 = (rng.gen::<f64>() < p2) as u8;
            let y2 = self.b0 + self.b1 * a1 as f64 + self.b2 * a2 as f64 + self.c * z2
                + rng.sample::<f64, _>(StandardNormal);
            a[0][i] = a1;
            a[1][i] = a2;
            z[0][(i, 0)] = z1;
            z[1][(i, 0)] = z2;
            y[0][(i, 0)] = y1;
            y[1][(i, 0)] = y2;
            observed[0][i] = if a1 == 1 { p1 } else { 1.0 - p1 };
            observed[1][i] = if a2 == 1 { p2 } else { 1.0 - p2 };
            for s in 0..2 {
                eta2[s][i] = self.b0 + self.b1 * a1 as f64 + self.b2 * s as f64 + self.c * z2;
            }
            for idx in 0..4 {
                let (x1, x2) = ((idx >> 1) as f64, (idx & 1) as f64);
                eta1[idx][i] = self.b0 + self.b1 * x1 + self.b2 * x2 + self.c * (0.5 * z1 + 0.3 * x1);
            }
        }
        let dataset = LongitudinalDataset::new(a, z, y, None)?;
        let truth = NuisanceValues::new(observed, vec![eta1, eta2])?;
        Ok(AnalyticSample {
            dataset,
            truth,
            theta: self.theta(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mase,
    MsmLm,
    IceLm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mase => "mase",
            Method::MsmLm => "msm_lm",
            Method::IceLm => "ice_lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "mase" => Ok(Method::Mase),
            "msm_lm" => Ok(Method::MsmLm),
            "ice_lm" => Ok(Method::IceLm),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// MASE settings; its trim bounds also apply to the MSM-lm weights.
    pub mase: MaseConfig,
    /// Bootstrap resamples for baseline SEs; 0 skips them.
    pub baseline_bootstrap: usize,
    pub n_oracle: usize,
    pub oracle_seed: u64,
    /// Outcome analysed, 1-based.
    pub outcome: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            mase: MaseConfig::default(),
            baseline_bootstrap: 0,
            n_oracle: 200_000,
            oracle_seed: 20_240_101,
            outcome: 1,
        }
    }
}

/// One method's result on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replication: usize,
    pub seed: u64,
    pub method: Method,
    pub ate: Option<f64>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub estimation: f64,
    pub mc_sd: f64,
    pub relative_bias: f64,
    /// Mean estimated SE, NaN when the method reported none.
    pub estimated_se: f64,
    /// Share of intervals covering the truth, NaN without intervals.
    pub coverage: f64,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub spec: DgpSpec,
    pub spec_hash: String,
    pub truth: Truth,
    pub replications: usize,
    pub base_seed: u64,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

pub const REPORT_HEADER: [&str; 6] = ["method", "estimation", "mc_sd", "relative_bias", "estimated_se", "coverage"];

/// Formats with six significant digits, locale independent. Non-finite
/// values print as `NA`.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let e = format!("{x:.5e}");
    let exp: i32 = e.split('e').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    if (-4..6).contains(&exp) {
        format!("{x:.*}", (5 - exp) as usize)
    } else {
        e
    }
}

impl MonteCarloReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).expect("in-memory write");
        for s in &self.summaries {
            w.write_record([
                s.method.name().to_string(),
                fmt_sig(s.estimation),
                fmt_sig(s.mc_sd),
                fmt_sig(s.relative_bias),
                fmt_sig(s.estimated_se),
                fmt_sig(s.coverage),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn run_method(method: Method, ds: &LongitudinalDataset, cfg: &MonteCarloConfig, seed: u64) -> Result<(f64, Option<f64>, Option<(f64, f64)>)> {
    match method {
        Method::Mase => {
            let r = run_mase(ds, cfg.outcome, &cfg.mase.reseeded(seed))?;
            Ok((r.estimate.ate, Some(r.sandwich.se_ate), Some(r.sandwich.ci)))
        }
        Method::MsmLm | Method::IceLm => {
            let b = if method == Method::MsmLm { BaselineMethod::MsmLm } else { BaselineMethod::IceLm };
            let est = if cfg.baseline_bootstrap > 0 {
                with_bootstrap(b, ds, cfg.outcome, cfg.mase.nuisance.trim, cfg.baseline_bootstrap, cfg.mase.alpha, derive_seed(seed, &[0xb5]))?
            } else {
                run_baseline(b, ds, cfg.outcome, cfg.mase.nuisance.trim)?
            };
            Ok((est.ate, est.se(), est.ci()))
        }
    }
}

/// Aggregates records (already in replication order) against `truth`.
pub fn summarize(method: Method, records: &[ReplicateRecord], truth: f64) -> MethodSummary {
    let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
    let ates: Vec<f64> = mine.iter().filter_map(|r| r.ate).collect();
    let ses: Vec<f64> = mine.iter().filter_map(|r| r.se).collect();
    let hits: Vec<f64> = mine
        .iter()
        .filter_map(|r| r.ci)
        .map(|(lo, hi)| (lo <= truth && truth <= hi) as u8 as f64)
        .collect();
    let estimation = if ates.is_empty() { f64::NAN } else { mean(&ates) };
    MethodSummary {
        method,
        estimation,
        mc_sd: if ates.len() < 2 { f64::NAN } else { sample_sd(&ates) },
        relative_bias: (estimation - truth) / truth,
        estimated_se: if ses.is_empty() { f64::NAN } else { mean(&ses) },
        coverage: if hits.is_empty() { f64::NAN } else { mean(&hits) },
        succeeded: ates.len(),
        failed: mine.len() - ates.len(),
    }
}

/// Runs `replications` independent replications; replication r uses seed
/// `base_seed + r`. Output does not depend on `workers`.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    methods: &[Method],
    replications: usize,
    base_seed: u64,
    workers: usize,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloReport> {
    spec.validate()?;
    if replications < 2 {
        return Err(Error::Config(format!("at least 2 replications are required, got {replications}")));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (truth, records) = pool.install(|| -> Result<(Truth, Vec<ReplicateRecord>)> {
        let truth = true_ate(spec, cfg.n_oracle, cfg.oracle_seed)?;
        let per_rep: Vec<Vec<ReplicateRecord>> = (0..replications)
            .into_par_iter()
            .map(|r| {
                let seed = base_seed.wrapping_add(r as u64);
                let data = gen_dataset(spec, seed);
                methods
                    .iter()
                    .map(|&m| {
                        let res = match &data {
                            Ok(d) => run_method(m, &d.dataset, cfg, seed),
                            Err(e) => Err(Error::InvalidSpec(e.to_string())),
                        };
                        match res {
                            Ok((ate, se, ci)) => ReplicateRecord {
                                replication: r,
                                seed,
                                method: m,
                                ate: Some(ate),
                                se,
                                ci,
                                error: None,
                            },
                            Err(e) => ReplicateRecord {
                                replication: r,
                                seed,
                                method: m,
                                ate: None,
                                se: None,
                                ci: None,
                                error: Some(e.to_string()),
                            },
                        }
                    })
                    .collect()
            })
            .collect();
        Ok((truth, per_rep.into_iter().flatten().collect()))
    })?;
    let summaries = methods.iter().map(|&m| summarize(m, &records, truth.value)).collect();
    Ok(MonteCarloReport {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        truth,
        replications,
        base_seed,
        summaries,
        records,
    })
}

/// Counts of generated true propensities outside `[lo, hi]`, per timepoint.
pub fn propensity_outside(sim: &SimulatedDataset, lo: f64, hi: f64) -> BTreeMap<usize, usize> {
    sim.propensity
        .iter()
        .enumerate()
        .map(|(t, p)| (t + 1, p.iter().filter(|&&v| v < lo || v > hi).count()))
        .collect()
}

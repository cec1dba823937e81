//! Base learners for nuisance estimation: ordinary least squares, logistic
//! regression, elastic net, random forests and gradient boosting, plus
//! cross-validated grid tuning.
//!
//! Every learner is a pure function of `(spec, X, y)`: all randomness is
//! drawn from RNG streams derived from `spec.seed`.

mod boosting;
mod elastic_net;
mod forest;
pub(crate) mod linear;
mod tree;
mod tuning;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{clamp_prob, sigmoid};

pub use elastic_net::kkt_check;
pub use tree::{Node, Tree};
pub use tuning::{cv_score, tune, Metric, TuneOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Linear,
    Logistic,
    ElasticNet,
    RandomForest,
    GradientBoosting,
}

impl LearnerKind {
    pub fn supports(self, task: Task) -> bool {
        match self {
            LearnerKind::Linear => task == Task::Regression,
            LearnerKind::Logistic => task == Task::Classification,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Hyperparameters shared by all learner kinds; each kind reads the
/// fields it needs and ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Elastic-net penalty strength on the standardized scale.
    pub lambda: f64,
    /// Elastic-net mixing: 1 is lasso, 0 is ridge.
    pub alpha: f64,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Fraction of features considered per split. Defaults: 1/3 for
    /// regression forests, sqrt(p)/p for classification forests, all
    /// features for boosting.
    pub feature_fraction: Option<f64>,
    /// Row subsampling fraction per boosting round.
    pub subsample: f64,
    /// Maximum number of candidate thresholds per feature in tree learners.
    pub max_bins: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lambda: 0.01,
            alpha: 0.5,
            max_depth: 3,
            learning_rate: 0.1,
            n_trees: 100,
            min_leaf: 5,
            feature_fraction: None,
            subsample: 1.0,
            max_bins: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default)]
    pub params: Hyperparameters,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        LearnerSpec {
            kind,
            params: Hyperparameters::default(),
            seed: 0,
        }
    }

    pub fn with_params(mut self, f: impl FnOnce(&mut Hyperparameters)) -> Self {
        f(&mut self.params);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |m: &str| Err(Error::InvalidSpec(format!("{:?}: {m}", self.kind)));
        if !(p.lambda >= 0.0) || !p.lambda.is_finite() {
            return bad("lambda must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&p.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if p.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if p.n_trees < 1 {
            return bad("n_trees must be >= 1");
        }
        if p.min_leaf < 1 {
            return bad("min_leaf must be >= 1");
        }
        if let Some(f) = p.feature_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("feature_fraction must lie in (0, 1]");
            }
        }
        if !(p.subsample > 0.0 && p.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(2..=256).contains(&p.max_bins) {
            return bad("max_bins must lie in [2, 256]");
        }
        Ok(())
    }
}

/// Column means and scales used to standardize features internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population standard deviations; constant columns get scale 1.
    pub scales: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            means.push(m);
            scales.push(if sd > 1e-12 * (1.0 + m.abs()) { sd } else { 1.0 });
        }
        Standardization { means, scales }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            for v in col.iter_mut() {
                *v = (*v - m) / s;
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    /// Linear predictor on the original feature scale; identity link for
    /// regression, logistic link for classification.
    Linear {
        intercept: f64,
        coefficients: Vec<f64>,
    },
    /// Averaged trees (random forest).
    Forest { trees: Vec<Tree> },
    /// Additive trees on the link scale (gradient boosting).
    Boosting {
        init: f64,
        learning_rate: f64,
        trees: Vec<Tree>,
    },
}

/// A fitted base learner. Predictions are a pure function of this state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub spec: LearnerSpec,
    pub task: Task,
    pub n_features: usize,
    pub standardization: Option<Standardization>,
    pub model: Model,
    /// Classification target was constant; an intercept-only model was fit.
    pub degenerate: bool,
    /// Iterative solver reached its tolerance.
    pub converged: bool,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    learner: FittedLearner,
}

impl FittedLearner {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Dimension(format!(
                "model trained on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let link: Vec<f64> = match &self.model {
            Model::Linear {
                intercept,
                coefficients,
            } => {
                let mut out = vec![*intercept; x.nrows()];
                for (j, col) in x.column_iter().enumerate() {
                    let b = coefficients[j];
                    if b != 0.0 {
                        for (o, v) in out.iter_mut().zip(col.iter()) {
                            *o += b * v;
                        }
                    }
                }
                out
            }
            Model::Forest { trees } => forest::predict(trees, x),
            Model::Boosting {
                init,
                learning_rate,
                trees,
            } => boosting::predict(*init, *learning_rate, trees, x),
        };
        Ok(match (self.task, &self.model) {
            (Task::Regression, _) => link,
            (Task::Classification, Model::Forest { .. }) => link.into_iter().map(clamp_prob).collect(),
            (Task::Classification, _) => link.into_iter().map(|v| clamp_prob(sigmoid(v))).collect(),
        })
    }

    /// Intercept and original-scale coefficients of linear-type models.
    pub fn linear_coefficients(&self) -> Option<(f64, &[f64])> {
        match &self.model {
            Model::Linear {
                intercept,
                coefficients,
            } => Some((*intercept, coefficients)),
            _ => None,
        }
    }

    /// Versioned JSON document for reproducibility audits.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            learner: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc.learner)
    }
}

/// Fits one learner. Classification targets must be 0/1.
pub fn fit_learner(spec: &LearnerSpec, task: Task, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    spec.validate()?;
    if !spec.kind.supports(task) {
        return Err(Error::InvalidSpec(format!(
            "{:?} does not support {:?}",
            spec.kind, task
        )));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows but target has {}",
            x.nrows(),
            y.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::Validation("at least two rows are required to fit".into()));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in training data".into()));
    }
    if task == Task::Classification {
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("classification targets must be 0 or 1".into()));
        }
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == y.len() {
            return Ok(intercept_only(spec, x.ncols(), y));
        }
    }
    match spec.kind {
        LearnerKind::Linear => linear::fit_ols(spec, x, y),
        LearnerKind::Logistic => linear::fit_logistic(spec, x, y),
        LearnerKind::ElasticNet => elastic_net::fit(spec, task, x, y),
        LearnerKind::RandomForest => forest::fit(spec, task, x, y),
        LearnerKind::GradientBoosting => boosting::fit(spec, task, x, y),
    }
}

fn intercept_only(spec: &LearnerSpec, p: usize, y: &[f64]) -> FittedLearner {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    FittedLearner {
        spec: spec.clone(),
        task: Task::Classification,
        n_features: p,
        standardization: None,
        model: Model::Linear {
            intercept: crate::numeric::logit(clamp_prob(mean)),
            coefficients: vec![0.0; p],
        },
        degenerate: true,
        converged: true,
    }
}

/// Default candidate grids, one inner list per base learner.
///
/// Kept deliberately small (at most six points per learner) so that Monte
/// Carlo runs stay affordable.
pub fn default_grids(task: Task) -> Vec<Vec<LearnerSpec>> {
    let first = match task {
        Task::Regression => LearnerKind::Linear,
        Task::Classification => LearnerKind::Logistic,
    };
    let lambdas: &[f64] = match task {
        Task::Regression => &[0.01, 0.05, 0.2],
        Task::Classification => &[0.005, 0.02, 0.08],
    };
    let enet = lambdas
        .iter()
        .map(|&l| {
            LearnerSpec::new(LearnerKind::ElasticNet).with_params(|p| {
                p.lambda = l;
                p.alpha = 0.5;
            })
        })
        .collect();
    let forest = [4usize, 8, 12]
        .iter()
        .map(|&d| {
            LearnerSpec::new(LearnerKind::RandomForest).with_params(|p| {
                p.max_depth = d;
                p.n_trees = 100;
                p.min_leaf = 5;
            })
        })
        .collect();
    let mut boost = Vec::new();
    for &depth in &[2usize, 3] {
        for &lr in &[0.05, 0.1, 0.2] {
            boost.push(LearnerSpec::new(LearnerKind::GradientBoosting).with_params(|p| {
                p.max_depth = depth;
                p.learning_rate = lr;
                p.n_trees = 100;
                p.min_leaf = 5;
            }));
        }
    }
    vec![vec![LearnerSpec::new(first)], enet, forest, boost]
}

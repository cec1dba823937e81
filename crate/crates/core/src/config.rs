//! Run configuration shared by the command-line subcommands.
//!
//! Every field has a default, so `{}` is a valid configuration. Unknown keys
//! are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mase::MaseConfig;
use crate::simulation::{DgpSpec, Method, MonteCarloConfig};

pub const WORKERS_ENV: &str = "LONGICAUSAL_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Wide CSV input for `estimate` and `diagnose`.
    pub dataset: Option<PathBuf>,
    /// Column-role map; inferred from the header naming convention when absent.
    pub schema: Option<PathBuf>,
    /// Outcomes to analyse, 1-based; empty means all.
    pub outcomes: Vec<usize>,
    pub methods: Vec<Method>,
    pub mase: MaseConfig,
    /// When set, derives the fold and learner seeds (estimate) or the base
    /// seed (simulate).
    pub seed: Option<u64>,
    /// Bootstrap resamples for baseline SEs in `estimate`; 0 skips them.
    pub baseline_bootstrap: usize,
    pub workers: Option<usize>,
    pub out: PathBuf,
    /// Also write per-subject nuisance values.
    pub dump_nuisance: bool,
    pub simulation: SimulationConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            schema: None,
            outcomes: Vec::new(),
            methods: vec![Method::Mase],
            mase: MaseConfig::default(),
            seed: None,
            baseline_bootstrap: 200,
            workers: None,
            out: PathBuf::from("out"),
            dump_nuisance: false,
            simulation: SimulationConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub spec: DgpSpec,
    pub replications: usize,
    pub base_seed: u64,
    /// Bootstrap resamples for baseline SEs; 0 skips them.
    pub baseline_bootstrap: usize,
    pub n_oracle: usize,
    pub oracle_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let mc = MonteCarloConfig::default();
        SimulationConfig {
            spec: DgpSpec::default(),
            replications: 100,
            base_seed: 1,
            baseline_bootstrap: mc.baseline_bootstrap,
            n_oracle: mc.n_oracle,
            oracle_seed: mc.oracle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Equal-width propensity histogram bins on [0, 1].
    pub bins: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig { bins: 20 }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.mase.nuisance.validate()?;
        if !(self.mase.alpha > 0.0 && self.mase.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.mase.alpha)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.outcomes.contains(&0) {
            return Err(Error::Config("outcome indices are 1-based".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.diagnose.bins == 0 {
            return Err(Error::Config("diagnose.bins must be positive".into()));
        }
        Ok(())
    }

    /// MASE settings after applying `seed`.
    pub fn resolved_mase(&self) -> MaseConfig {
        match self.seed {
            Some(s) => self.mase.reseeded(s),
            None => self.mase.clone(),
        }
    }

    pub fn monte_carlo(&self) -> MonteCarloConfig {
        MonteCarloConfig {
            mase: self.mase.clone(),
            baseline_bootstrap: self.simulation.baseline_bootstrap,
            n_oracle: self.simulation.n_oracle,
            oracle_seed: self.simulation.oracle_seed,
            outcome: 1,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.seed.unwrap_or(self.simulation.base_seed)
    }

    /// Worker count from the config, then the environment, then the
    /// machine's available parallelism. Out-of-band settings do not enter
    /// the config hash.
    pub fn effective_workers(&self) -> Result<usize> {
        if let Some(w) = self.workers {
            return Ok(w);
        }
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            return match v.trim().parse::<usize>() {
                Ok(w) if w > 0 => Ok(w),
                _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
            };
        }
        Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the worker count
    /// and output directory, which do not affect results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

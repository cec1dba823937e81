//! Subcommands behind the `longicausal` binary: `estimate`, `simulate` and
//! `diagnose`. Each resolves a [`RunConfig`] from an optional JSON file plus
//! flag overrides and writes its outputs under the configured directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, with_bootstrap, BaselineMethod};
use crate::config::RunConfig;
use crate::dataset::{load_wide_csv, split_folds, LongitudinalDataset, Schema};
use crate::error::{Error, Result};
use crate::mase::{fit_mase_outcomes, summarize_propensity, PropensitySummary};
use crate::nuisance::{cumulative_weights, fit_propensity, write_diagnostics};
use crate::numeric::{derive_seed, quantile};
use crate::report::{DatasetSummary, EstimateReport, MethodRow, OutcomeReport, SOFTWARE, VERSION};
use crate::simulation::{fmt_sig, run_monte_carlo, Method, MonteCarloReport};

#[derive(Debug, Parser)]
#[command(
    name = "longicausal",
    version,
    about = "Doubly robust longitudinal treatment effects",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate joint treatment effects on a wide CSV dataset.
    Estimate(CommonArgs),
    /// Run a Monte Carlo study on the synthetic data generator.
    Simulate(CommonArgs),
    /// Propensity histograms, weight quantiles and trim counts.
    Diagnose(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset CSV, overriding the config.
    #[arg(long, value_parser = any_path)]
    pub dataset: Option<PathBuf>,
    /// Schema JSON, overriding the config.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to LONGICAUSAL_WORKERS.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of mase, msm_lm, ice_lm.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Trim bounds as LO,HI.
    #[arg(long, value_delimiter = ',')]
    pub trim: Option<Vec<f64>>,
    /// Monte Carlo replications (simulate only).
    #[arg(long)]
    pub replications: Option<usize>,
    /// Write per-subject nuisance values (estimate only).
    #[arg(long)]
    pub dump_nuisance: bool,
}

// Accepts the empty path so that validation can report it.
fn any_path(s: &str) -> std::result::Result<PathBuf, std::convert::Infallible> {
    Ok(PathBuf::from(s))
}

impl CommonArgs {
    /// Loads the config file, if any, and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(s) = &self.schema {
            cfg.schema = Some(s.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.iter().map(|s| Method::parse(s)).collect::<Result<_>>()?;
        }
        if let Some(a) = self.alpha {
            cfg.mase.alpha = a;
        }
        if let Some(t) = &self.trim {
            if t.len() != 2 {
                return Err(Error::Config(format!("--trim takes LO,HI, got {} values", t.len())));
            }
            cfg.mase.nuisance.trim = (t[0], t[1]);
        }
        if let Some(r) = self.replications {
            cfg.simulation.replications = r;
        }
        if self.dump_nuisance {
            cfg.dump_nuisance = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Machine-readable error document printed on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub kind: String,
    pub message: String,
}

impl ErrorDocument {
    pub fn new(e: &Error) -> Self {
        ErrorDocument {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("error serializes")
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs `f` inside a thread pool sized by [`RunConfig::effective_workers`].
pub fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_workers()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Loads the configured dataset, inferring the schema when none is given.
pub fn load_dataset(cfg: &RunConfig) -> Result<LongitudinalDataset> {
    let path = cfg
        .dataset
        .as_ref()
        .filter(|p| !p.as_os_str().is_empty())
        .ok_or_else(|| Error::Validation("no dataset path given".into()))?;
    let schema = match &cfg.schema {
        Some(s) => Schema::from_path(s)?,
        None => {
            let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Validation(format!("{other:?}")),
            })?;
            let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
            Schema::infer(&header)?
        }
    };
    load_wide_csv(path, &schema)
}

fn outcomes_of(cfg: &RunConfig, ds: &LongitudinalDataset) -> Result<Vec<usize>> {
    if cfg.outcomes.is_empty() {
        return Ok((1..=ds.n_outcomes()).collect());
    }
    if let Some(&j) = cfg.outcomes.iter().find(|&&j| j > ds.n_outcomes()) {
        return Err(Error::Validation(format!(
            "outcome {j} requested but the dataset has {}",
            ds.n_outcomes()
        )));
    }
    Ok(cfg.outcomes.clone())
}

/// Runs the configured methods on the dataset and writes `estimate.json`,
/// `estimate.csv` and, when requested, `nuisance_<j>.csv`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let outcomes = outcomes_of(cfg, &ds)?;
    let mase_cfg = cfg.resolved_mase();
    create_out(&cfg.out)?;
    let report = with_pool(cfg, || {
        let mase = if cfg.methods.contains(&Method::Mase) {
            Some(fit_mase_outcomes(&ds, &outcomes, &mase_cfg)?)
        } else {
            None
        };
        let mut reports = Vec::with_capacity(outcomes.len());
        for (k, &j) in outcomes.iter().enumerate() {
            let mut rows = Vec::new();
            for &m in &cfg.methods {
                let row = match m {
                    Method::Mase => MethodRow::from_mase(&mase.as_ref().expect("fitted above")[k].result),
                    Method::MsmLm | Method::IceLm => {
                        let b = if m == Method::MsmLm { BaselineMethod::MsmLm } else { BaselineMethod::IceLm };
                        let trim = mase_cfg.nuisance.trim;
                        let est = if cfg.baseline_bootstrap > 0 {
                            let seed = derive_seed(mase_cfg.nuisance.seed, &[0xb5, j as u64, m as u64]);
                            with_bootstrap(b, &ds, j, trim, cfg.baseline_bootstrap, mase_cfg.alpha, seed)?
                        } else {
                            run_baseline(b, &ds, j, trim)?
                        };
                        MethodRow::from_baseline(m, &est)
                    }
                };
                rows.push(row);
            }
            reports.push(OutcomeReport {
                outcome: j,
                name: ds.names().outcomes[ds.n_timepoints() - 1][j - 1].clone(),
                methods: rows,
            });
        }
        if cfg.dump_nuisance {
            for fit in mase.iter().flatten() {
                let mut buf = Vec::new();
                write_diagnostics(&ds, &fit.folds, &fit.propensity, &fit.ice, &mut buf)?;
                let path = cfg.out.join(format!("nuisance_{}.csv", fit.result.outcome));
                fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            }
        }
        let propensity = mase.as_ref().and_then(|m| m.first()).map(|f| f.result.propensity.clone());
        Ok(EstimateReport {
            software: SOFTWARE.to_string(),
            version: VERSION.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            fold_seed: mase_cfg.fold_seed,
            learner_seed: mase_cfg.nuisance.seed,
            dataset: DatasetSummary {
                path: cfg.dataset.as_ref().map(|p| p.display().to_string()),
                n_subjects: ds.n_subjects(),
                n_timepoints: ds.n_timepoints(),
                n_outcomes: ds.n_outcomes(),
            },
            propensity,
            outcomes: reports,
        })
    })?;
    write_file(&cfg.out.join("estimate.json"), &report.to_json())?;
    write_file(&cfg.out.join("estimate.csv"), &report.to_csv())?;
    Ok(report)
}

/// Runs the Monte Carlo study and writes `simulation.csv` and
/// `simulation.json`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let workers = cfg.effective_workers()?;
    create_out(&cfg.out)?;
    let report = run_monte_carlo(
        &cfg.simulation.spec,
        &cfg.methods,
        cfg.simulation.replications,
        cfg.base_seed(),
        workers,
        &cfg.monte_carlo(),
    )?;
    write_file(&cfg.out.join("simulation.csv"), &report.to_csv())?;
    write_file(&cfg.out.join("simulation.json"), &(report.to_json()? + "\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub t: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantile {
    pub t: usize,
    pub q: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub config_hash: String,
    pub fold_seed: u64,
    pub learner_seed: u64,
    pub trim: (f64, f64),
    pub histogram: Vec<HistogramBin>,
    pub weight_quantiles: Vec<WeightQuantile>,
    pub summaries: Vec<PropensitySummary>,
}

pub const WEIGHT_QUANTILES: [f64; 7] = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];

/// Equal-width histogram on [0, 1]; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize, t: usize) -> Vec<HistogramBin> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            t,
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count,
        })
        .collect()
}

/// Fits the cross-fitted propensity stacks and writes `ps_histogram.csv`,
/// `weights.csv`, `trim.csv` and `diagnose.json`.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let mase_cfg = cfg.resolved_mase();
    create_out(&cfg.out)?;
    let pf = with_pool(cfg, || {
        let folds = split_folds(&ds, mase_cfg.fold_seed)?;
        fit_propensity(&ds, &folds, &mase_cfg.nuisance)
    })?;
    let summaries = summarize_propensity(&pf)?;
    let mut hist = Vec::new();
    let mut wq = Vec::new();
    for t in 1..=ds.n_timepoints() {
        hist.extend(histogram(&pf.raw[t - 1], cfg.diagnose.bins, t));
        let w = cumulative_weights(&pf, t)?;
        wq.extend(WEIGHT_QUANTILES.iter().map(|&q| WeightQuantile {
            t,
            q,
            weight: quantile(&w, q),
        }));
    }
    let report = DiagnoseReport {
        config_hash: cfg.hash(),
        fold_seed: mase_cfg.fold_seed,
        learner_seed: mase_cfg.nuisance.seed,
        trim: mase_cfg.nuisance.trim,
        histogram: hist,
        weight_quantiles: wq,
        summaries,
    };
    let mut h = csv::Writer::from_writer(Vec::new());
    h.write_record(["t", "lower", "upper", "count"])?;
    for b in &report.histogram {
        h.write_record([b.t.to_string(), fmt_sig(b.lower), fmt_sig(b.upper), b.count.to_string()])?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "quantile", "weight"])?;
    for q in &report.weight_quantiles {
        w.write_record([q.t.to_string(), fmt_sig(q.q), fmt_sig(q.weight)])?;
    }
    let mut tr = csv::Writer::from_writer(Vec::new());
    tr.write_record(["t", "trim_hits", "min", "max"])?;
    for s in &report.summaries {
        tr.write_record([s.t.to_string(), s.trim_hits.to_string(), fmt_sig(s.min), fmt_sig(s.max)])?;
    }
    let out = |wr: csv::Writer<Vec<u8>>| String::from_utf8(wr.into_inner().expect("flush")).expect("utf8");
    write_file(&cfg.out.join("ps_histogram.csv"), &out(h))?;
    write_file(&cfg.out.join("weights.csv"), &out(w))?;
    write_file(&cfg.out.join("trim.csv"), &out(tr))?;
    write_file(
        &cfg.out.join("diagnose.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    Ok(report)
}

/// Parses arguments, runs the subcommand and returns the process exit code.
/// Failures print an error document to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => a.resolve().and_then(|c| cmd_estimate(&c)).map(|r| {
            for o in &r.outcomes {
                for m in &o.methods {
                    println!("{} {} ate={} se={}", o.name, m.method.name(), fmt_sig(m.ate), fmt_sig(m.se.unwrap_or(f64::NAN)));
                }
            }
        }),
        Command::Simulate(a) => a.resolve().and_then(|c| cmd_simulate(&c)).map(|r| print!("{}", r.to_csv())),
        Command::Diagnose(a) => a.resolve().and_then(|c| cmd_diagnose(&c)).map(|r| {
            for s in &r.summaries {
                println!("t={} trim_hits={} median={}", s.t, s.trim_hits, fmt_sig(s.median));
            }
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", ErrorDocument::new(&e).to_json());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value_once() {
        let h = histogram(&[0.0, 0.05, 0.5, 0.999, 1.0], 10, 1);
        assert_eq!(h.len(), 10);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[5].count, 1);
        assert_eq!(h[9].count, 2);
    }

    #[test]
    fn flags_override_the_config() {
        let args = CommonArgs {
            seed: Some(4),
            alpha: Some(0.1),
            trim: Some(vec![0.05, 0.95]),
            methods: Some(vec!["ice-lm".into(), "mase".into()]),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.mase.alpha, 0.1);
        assert_eq!(c.mase.nuisance.trim, (0.05, 0.95));
        assert_eq!(c.methods, vec![Method::IceLm, Method::Mase]);
        let bad = CommonArgs {
            methods: Some(vec!["tmle".into()]),
            ..Default::default()
        };
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn missing_dataset_is_a_validation_error() {
        let c = RunConfig {
            dataset: Some(PathBuf::new()),
            ..RunConfig::default()
        };
        assert!(matches!(cmd_estimate(&c), Err(Error::Validation(_))));
        assert!(matches!(load_dataset(&RunConfig::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn error_document_is_json() {
        let doc = ErrorDocument::new(&Error::Validation("x".into()));
        let v: serde_json::Value = serde_json::from_str(&doc.to_json()).unwrap();
        assert_eq!(v["error"]["kind"], "validation");
    }
}

//! Longitudinal data model: wide-format ingestion, history designs,
//! treatment-regime enumeration and two-fold subject splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_from;

/// Role of a single CSV column, written `exposure@t`, `covariate@t`,
/// `outcome@t` or `baseline` in schema files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ColumnRole {
    Exposure(usize),
    Covariate(usize),
    Outcome(usize),
    Baseline,
}

impl FromStr for ColumnRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "baseline" {
            return Ok(ColumnRole::Baseline);
        }
        let (kind, t) = s
            .split_once('@')
            .ok_or_else(|| Error::Schema(format!("role '{s}' is not of the form kind@t")))?;
        let t: usize = t
            .parse()
            .map_err(|_| Error::Schema(format!("role '{s}' has a non-integer timepoint")))?;
        if t == 0 {
            return Err(Error::Schema(format!("role '{s}': timepoints start at 1")));
        }
        match kind {
            "exposure" => Ok(ColumnRole::Exposure(t)),
            "covariate" => Ok(ColumnRole::Covariate(t)),
            "outcome" => Ok(ColumnRole::Outcome(t)),
            other => Err(Error::Schema(format!("unknown column role '{other}'"))),
        }
    }
}

impl fmt::Display for ColumnRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnRole::Exposure(t) => write!(f, "exposure@{t}"),
            ColumnRole::Covariate(t) => write!(f, "covariate@{t}"),
            ColumnRole::Outcome(t) => write!(f, "outcome@{t}"),
            ColumnRole::Baseline => f.write_str("baseline"),
        }
    }
}

impl Serialize for ColumnRole {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ColumnRole {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Column-role map for a wide CSV file. Serialized as a flat JSON object
/// `{"A_1": "exposure@1", "Z_1_1": "covariate@1", ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub roles: BTreeMap<String, ColumnRole>,
}

impl Schema {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Infers roles from the naming convention `A_t`, `Z_t_k`, `Y_t_j`, `B_k`.
    pub fn infer(header: &[String]) -> Result<Self> {
        let mut roles = BTreeMap::new();
        for name in header {
            let parts: Vec<&str> = name.split('_').collect();
            let t = |s: &str| -> Option<usize> { s.parse().ok().filter(|&t| t > 0) };
            let role = match parts.as_slice() {
                ["A", ts] => t(ts).map(ColumnRole::Exposure),
                ["Z", ts, _] => t(ts).map(ColumnRole::Covariate),
                ["Y", ts, _] => t(ts).map(ColumnRole::Outcome),
                ["B", _] => Some(ColumnRole::Baseline),
                _ => None,
            };
            let role = role.ok_or_else(|| {
                Error::Schema(format!(
                    "cannot infer a role for column '{name}' (expected A_t, Z_t_k, Y_t_j or B_k)"
                ))
            })?;
            roles.insert(name.clone(), role);
        }
        Ok(Schema { roles })
    }
}

/// Column names carried with a dataset so it can be written back out.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnNames {
    pub exposures: Vec<String>,
    pub covariates: Vec<Vec<String>>,
    pub outcomes: Vec<Vec<String>>,
    pub baseline: Vec<String>,
}

impl ColumnNames {
    fn conventional(n_t: usize, p: &[usize], q: usize, p0: usize) -> Self {
        ColumnNames {
            exposures: (1..=n_t).map(|t| format!("A_{t}")).collect(),
            covariates: (1..=n_t)
                .map(|t| (1..=p[t - 1]).map(|k| format!("Z_{t}_{k}")).collect())
                .collect(),
            outcomes: (1..=n_t)
                .map(|t| (1..=q).map(|j| format!("Y_{t}_{j}")).collect())
                .collect(),
            baseline: (1..=p0).map(|k| format!("B_{k}")).collect(),
        }
    }
}

/// n subjects observed at T timepoints: binary exposures, per-timepoint
/// covariate blocks, per-timepoint outcome blocks and optional baseline
/// covariates. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    exposures: Vec<Vec<u8>>,
    covariates: Vec<DMatrix<f64>>,
    outcomes: Vec<DMatrix<f64>>,
    baseline: DMatrix<f64>,
    names: ColumnNames,
}

impl LongitudinalDataset {
    /// Validates and assembles a dataset. `exposures[t][i]` is subject i's
    /// exposure at timepoint t+1.
    pub fn new(
        exposures: Vec<Vec<u8>>,
        covariates: Vec<DMatrix<f64>>,
        outcomes: Vec<DMatrix<f64>>,
        baseline: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n_t = exposures.len();
        let n = exposures.first().map(|e| e.len()).unwrap_or(0);
        let q = outcomes.first().map(|o| o.ncols()).unwrap_or(0);
        let p: Vec<usize> = covariates.iter().map(|c| c.ncols()).collect();
        let baseline = baseline.unwrap_or_else(|| DMatrix::zeros(n, 0));
        if covariates.len() != n_t {
            return Err(Error::Validation(format!(
                "{} covariate blocks for {n_t} timepoints",
                covariates.len()
            )));
        }
        let names = ColumnNames::conventional(n_t, &p, q, baseline.ncols());
        Self::with_names(exposures, covariates, outcomes, baseline, names)
    }

    pub fn with_names(
        exposures: Vec<Vec<u8>>,
        covariates: Vec<DMatrix<f64>>,
        outcomes: Vec<DMatrix<f64>>,
        baseline: DMatrix<f64>,
        names: ColumnNames,
    ) -> Result<Self> {
        let n_t = exposures.len();
        if n_t == 0 {
            return Err(Error::Validation("at least one timepoint is required".into()));
        }
        let n = exposures[0].len();
        if covariates.len() != n_t || outcomes.len() != n_t {
            return Err(Error::Validation(format!(
                "expected {n_t} covariate and outcome blocks, got {} and {}",
                covariates.len(),
                outcomes.len()
            )));
        }
        let q = outcomes[0].ncols();
        if q == 0 {
            return Err(Error::Validation("at least one outcome per timepoint is required".into()));
        }
        for (t, e) in exposures.iter().enumerate() {
            if e.len() != n {
                return Err(Error::Validation(format!(
                    "exposure at t={} has {} rows, expected {n}",
                    t + 1,
                    e.len()
                )));
            }
            if let Some(i) = e.iter().position(|&a| a > 1) {
                return Err(Error::Validation(format!(
                    "non-binary exposure value {} at t={}, row {}",
                    e[i],
                    t + 1,
                    i + 1
                )));
            }
        }
        for (t, (c, o)) in covariates.iter().zip(&outcomes).enumerate() {
            if c.nrows() != n || o.nrows() != n {
                return Err(Error::Validation(format!("row count mismatch at t={}", t + 1)));
            }
            if o.ncols() != q {
                return Err(Error::Validation(format!(
                    "t={} has {} outcomes, expected {q}",
                    t + 1,
                    o.ncols()
                )));
            }
            if c.iter().chain(o.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "missing or non-finite value at t={}",
                    t + 1
                )));
            }
        }
        if baseline.nrows() != n {
            return Err(Error::Validation("baseline row count mismatch".into()));
        }
        if baseline.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("missing or non-finite baseline value".into()));
        }
        let shape_ok = names.exposures.len() == n_t
            && names.covariates.len() == n_t
            && names.outcomes.len() == n_t
            && names.covariates.iter().zip(&covariates).all(|(nm, c)| nm.len() == c.ncols())
            && names.outcomes.iter().all(|nm| nm.len() == q)
            && names.baseline.len() == baseline.ncols();
        if !shape_ok {
            return Err(Error::Validation("column names do not match block shapes".into()));
        }
        Ok(LongitudinalDataset {
            exposures,
            covariates,
            outcomes,
            baseline,
            names,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.exposures[0].len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.exposures.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes[0].ncols()
    }

    /// Number of covariates at timepoint `t` (1-based).
    pub fn n_covariates(&self, t: usize) -> usize {
        self.covariates[t - 1].ncols()
    }

    pub fn exposure(&self, t: usize) -> &[u8] {
        &self.exposures[t - 1]
    }

    pub fn covariates(&self, t: usize) -> &DMatrix<f64> {
        &self.covariates[t - 1]
    }

    pub fn outcomes(&self, t: usize) -> &DMatrix<f64> {
        &self.outcomes[t - 1]
    }

    /// Outcome `j` at timepoint `t`, both 1-based.
    pub fn outcome(&self, t: usize, j: usize) -> Vec<f64> {
        self.outcomes[t - 1].column(j - 1).iter().copied().collect()
    }

    pub fn baseline(&self) -> &DMatrix<f64> {
        &self.baseline
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    /// Observed treatment path of subject `i`.
    pub fn treatment_path(&self, i: usize) -> Vec<u8> {
        self.exposures.iter().map(|e| e[i]).collect()
    }

    /// New dataset made of the given rows (repeats allowed), in order.
    pub fn select_rows(&self, rows: &[usize]) -> LongitudinalDataset {
        let pick = |m: &DMatrix<f64>| m.select_rows(rows.iter());
        LongitudinalDataset {
            exposures: self
                .exposures
                .iter()
                .map(|e| rows.iter().map(|&i| e[i]).collect())
                .collect(),
            covariates: self.covariates.iter().map(pick).collect(),
            outcomes: self.outcomes.iter().map(pick).collect(),
            baseline: pick(&self.baseline),
            names: self.names.clone(),
        }
    }

    /// Schema matching the column names this dataset carries.
    pub fn schema(&self) -> Schema {
        let mut roles = BTreeMap::new();
        for (t, name) in self.names.exposures.iter().enumerate() {
            roles.insert(name.clone(), ColumnRole::Exposure(t + 1));
        }
        for (t, block) in self.names.covariates.iter().enumerate() {
            for name in block {
                roles.insert(name.clone(), ColumnRole::Covariate(t + 1));
            }
        }
        for (t, block) in self.names.outcomes.iter().enumerate() {
            for name in block {
                roles.insert(name.clone(), ColumnRole::Outcome(t + 1));
            }
        }
        for name in &self.names.baseline {
            roles.insert(name.clone(), ColumnRole::Baseline);
        }
        Schema { roles }
    }
}

/// Reads a wide CSV (one row per subject) according to `schema`.
///
/// Columns within a block keep their header order. Missing cells are
/// rejected; nothing is imputed.
pub fn load_wide_csv(path: &Path, schema: &Schema) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wide_csv(file, schema)
}

pub fn read_wide_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let mut roles = Vec::with_capacity(header.len());
    for name in &header {
        let role = schema
            .roles
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unmapped column '{name}'")))?;
        roles.push(*role);
    }
    for name in schema.roles.keys() {
        if !header.contains(name) {
            return Err(Error::Schema(format!("schema column '{name}' not found in file")));
        }
    }
    let n_t = roles
        .iter()
        .filter_map(|r| match r {
            ColumnRole::Exposure(t) | ColumnRole::Covariate(t) | ColumnRole::Outcome(t) => Some(*t),
            ColumnRole::Baseline => None,
        })
        .max()
        .ok_or_else(|| Error::Schema("schema declares no timepoints".into()))?;

    let mut exposure_col = vec![None; n_t];
    let mut cov_cols: Vec<Vec<usize>> = vec![Vec::new(); n_t];
    let mut out_cols: Vec<Vec<usize>> = vec![Vec::new(); n_t];
    let mut base_cols = Vec::new();
    for (c, role) in roles.iter().enumerate() {
        match *role {
            ColumnRole::Exposure(t) => {
                if exposure_col[t - 1].replace(c).is_some() {
                    return Err(Error::Schema(format!("more than one exposure column at t={t}")));
                }
            }
            ColumnRole::Covariate(t) => cov_cols[t - 1].push(c),
            ColumnRole::Outcome(t) => out_cols[t - 1].push(c),
            ColumnRole::Baseline => base_cols.push(c),
        }
    }
    let exposure_col: Vec<usize> = exposure_col
        .into_iter()
        .enumerate()
        .map(|(t, c)| c.ok_or_else(|| Error::Schema(format!("no exposure column at t={}", t + 1))))
        .collect::<Result<_>>()?;
    let q = out_cols[0].len();
    for (t, cols) in out_cols.iter().enumerate() {
        if cols.is_empty() || cols.len() != q {
            return Err(Error::Schema(format!(
                "t={} has {} outcome columns; every timepoint needs the same non-zero count",
                t + 1,
                cols.len()
            )));
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut exposures: Vec<Vec<u8>> = vec![Vec::new(); n_t];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = r + 2;
        if record.len() != header.len() {
            return Err(Error::Validation(format!(
                "line {line}: {} fields, expected {}",
                record.len(),
                header.len()
            )));
        }
        let mut values = Vec::with_capacity(header.len());
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() {
                return Err(Error::Validation(format!(
                    "missing value in column '{}' at line {line}",
                    header[c]
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Validation(format!(
                    "non-numeric value '{field}' in column '{}' at line {line}",
                    header[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value in column '{}' at line {line}",
                    header[c]
                )));
            }
            values.push(v);
        }
        for (t, &c) in exposure_col.iter().enumerate() {
            let v = values[c];
            let a = if v == 0.0 {
                0
            } else if v == 1.0 {
                1
            } else {
                return Err(Error::Validation(format!(
                    "non-binary exposure {v} in column '{}' at line {line}",
                    header[c]
                )));
            };
            exposures[t].push(a);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Validation("file contains no data rows".into()));
    }
    let n = rows.len();
    let block = |cols: &[usize]| DMatrix::from_fn(n, cols.len(), |i, k| rows[i][cols[k]]);
    let names = ColumnNames {
        exposures: exposure_col.iter().map(|&c| header[c].clone()).collect(),
        covariates: cov_cols
            .iter()
            .map(|cols| cols.iter().map(|&c| header[c].clone()).collect())
            .collect(),
        outcomes: out_cols
            .iter()
            .map(|cols| cols.iter().map(|&c| header[c].clone()).collect())
            .collect(),
        baseline: base_cols.iter().map(|&c| header[c].clone()).collect(),
    };
    LongitudinalDataset::with_names(
        exposures,
        cov_cols.iter().map(|c| block(c)).collect(),
        out_cols.iter().map(|c| block(c)).collect(),
        block(&base_cols),
        names,
    )
}

/// Writes the dataset as a wide CSV with column order exposures,
/// covariates by time, outcomes by time, baseline. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_wide_csv(ds: &LongitudinalDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_wide_csv_to(ds, file)
}

pub fn write_wide_csv_to<W: std::io::Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = ds.names();
    let mut header: Vec<&str> = names.exposures.iter().map(String::as_str).collect();
    header.extend(names.covariates.iter().flatten().map(String::as_str));
    header.extend(names.outcomes.iter().flatten().map(String::as_str));
    header.extend(names.baseline.iter().map(String::as_str));
    w.write_record(&header)?;
    let n_t = ds.n_timepoints();
    for i in 0..ds.n_subjects() {
        let mut rec: Vec<String> = (1..=n_t).map(|t| ds.exposure(t)[i].to_string()).collect();
        for t in 1..=n_t {
            rec.extend(ds.covariates(t).row(i).iter().map(|v| v.to_string()));
        }
        for t in 1..=n_t {
            rec.extend(ds.outcomes(t).row(i).iter().map(|v| v.to_string()));
        }
        rec.extend(ds.baseline().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// A binary treatment path (a_start, ..., a_T). Full regimes start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TreatmentRegime {
    start: usize,
    values: Vec<u8>,
}

impl TreatmentRegime {
    pub fn new(start: usize, values: Vec<u8>) -> Result<Self> {
        if start == 0 {
            return Err(Error::Validation("regime start index is 1-based".into()));
        }
        if values.iter().any(|&a| a > 1) {
            return Err(Error::Validation("regime entries must be 0 or 1".into()));
        }
        Ok(TreatmentRegime { start, values })
    }

    pub fn full(values: Vec<u8>) -> Result<Self> {
        Self::new(1, values)
    }

    /// Regime of the given length whose lexicographic rank is `index`.
    pub fn from_index(start: usize, len: usize, index: usize) -> Self {
        let values = (0..len).map(|k| ((index >> (len - 1 - k)) & 1) as u8).collect();
        TreatmentRegime { start, values }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Lexicographic rank among regimes of the same length (first entry most significant).
    pub fn index(&self) -> usize {
        self.values.iter().fold(0, |acc, &a| (acc << 1) | a as usize)
    }

    pub fn is_all(&self, a: u8) -> bool {
        self.values.iter().all(|&v| v == a)
    }
}

impl fmt::Display for TreatmentRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (k, a) in self.values.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

/// All 2^T full regimes in lexicographic order.
pub fn enumerate_regimes(n_timepoints: usize) -> Vec<TreatmentRegime> {
    (0..1usize << n_timepoints)
        .map(|idx| TreatmentRegime::from_index(1, n_timepoints, idx))
        .collect()
}

/// All 2^(T-t+1) suffixes (a_t, ..., a_T) in lexicographic order.
pub fn enumerate_suffixes(n_timepoints: usize, t: usize) -> Result<Vec<TreatmentRegime>> {
    if t == 0 || t > n_timepoints {
        return Err(Error::Validation(format!(
            "timepoint {t} out of range 1..={n_timepoints}"
        )));
    }
    let len = n_timepoints - t + 1;
    Ok((0..1usize << len)
        .map(|idx| TreatmentRegime::from_index(t, len, idx))
        .collect())
}

/// Provenance of one column of a [`HistoryDesign`]. Indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnLabel {
    Exposure { t: usize },
    Baseline { k: usize },
    Covariate { t: usize, k: usize },
    Outcome { t: usize, j: usize },
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnLabel::Exposure { t } => write!(f, "A@{t}"),
            ColumnLabel::Baseline { k } => write!(f, "Z@0[{k}]"),
            ColumnLabel::Covariate { t, k } => write!(f, "Z@{t}[{k}]"),
            ColumnLabel::Outcome { t, j } => write!(f, "Y@{t}[{j}]"),
        }
    }
}

/// Feature matrix for the history at timepoint t.
///
/// Column order: exposures A_1..A_{t-1} (then A_t when requested),
/// baseline covariates, covariate blocks Z_1..Z_t, lagged outcome blocks
/// Y_1..Y_{t-1}.
#[derive(Debug, Clone)]
pub struct HistoryDesign {
    pub t: usize,
    pub includes_current_exposure: bool,
    pub matrix: DMatrix<f64>,
    pub labels: Vec<ColumnLabel>,
}

impl HistoryDesign {
    pub fn n_columns(&self) -> usize {
        self.labels.len()
    }

    /// Column holding exposure A_s, if present.
    pub fn exposure_column(&self, s: usize) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| *l == ColumnLabel::Exposure { t: s })
    }

    /// Copy of the design with exposure A_s set to `a` for every row.
    pub fn with_exposure(&self, s: usize, a: u8) -> Result<DMatrix<f64>> {
        let c = self.exposure_column(s).ok_or_else(|| {
            Error::Validation(format!("history at t={} has no column for A@{s}", self.t))
        })?;
        let mut m = self.matrix.clone();
        m.column_mut(c).fill(a as f64);
        Ok(m)
    }
}

pub fn build_history(
    ds: &LongitudinalDataset,
    t: usize,
    include_current_exposure: bool,
) -> Result<HistoryDesign> {
    let n_t = ds.n_timepoints();
    if t == 0 || t > n_t {
        return Err(Error::Validation(format!("timepoint {t} out of range 1..={n_t}")));
    }
    let n = ds.n_subjects();
    let last_exposure = if include_current_exposure { t } else { t - 1 };
    let mut labels = Vec::new();
    for s in 1..=last_exposure {
        labels.push(ColumnLabel::Exposure { t: s });
    }
    for k in 1..=ds.baseline().ncols() {
        labels.push(ColumnLabel::Baseline { k });
    }
    for s in 1..=t {
        for k in 1..=ds.n_covariates(s) {
            labels.push(ColumnLabel::Covariate { t: s, k });
        }
    }
    for s in 1..t {
        for j in 1..=ds.n_outcomes() {
            labels.push(ColumnLabel::Outcome { t: s, j });
        }
    }
    let mut matrix = DMatrix::zeros(n, labels.len());
    for (c, label) in labels.iter().enumerate() {
        let mut col = matrix.column_mut(c);
        match *label {
            ColumnLabel::Exposure { t } => {
                for (dst, &a) in col.iter_mut().zip(ds.exposure(t)) {
                    *dst = a as f64;
                }
            }
            ColumnLabel::Baseline { k } => col.copy_from(&ds.baseline().column(k - 1)),
            ColumnLabel::Covariate { t, k } => col.copy_from(&ds.covariates(t).column(k - 1)),
            ColumnLabel::Outcome { t, j } => col.copy_from(&ds.outcomes(t).column(j - 1)),
        }
    }
    Ok(HistoryDesign {
        t,
        includes_current_exposure: include_current_exposure,
        matrix,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fold {
    A,
    B,
}

impl Fold {
    pub fn opposite(self) -> Fold {
        match self {
            Fold::A => Fold::B,
            Fold::B => Fold::A,
        }
    }
}

/// Random two-way partition of subjects used for cross-fitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_a: Vec<usize>,
    pub fold_b: Vec<usize>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn rows(&self, fold: Fold) -> &[usize] {
        match fold {
            Fold::A => &self.fold_a,
            Fold::B => &self.fold_b,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.fold_a.len() + self.fold_b.len()
    }

    /// Fold membership of every subject.
    pub fn membership(&self) -> Vec<Fold> {
        let mut m = vec![Fold::A; self.n_subjects()];
        for &i in &self.fold_b {
            m[i] = Fold::B;
        }
        m
    }
}

pub fn split_folds(ds: &LongitudinalDataset, seed: u64) -> Result<FoldSplit> {
    split_subjects(ds.n_subjects(), seed)
}

/// Uniformly random halves of `0..n`; fold A gets `n / 2` subjects.
pub fn split_subjects(n: usize, seed: u64) -> Result<FoldSplit> {
    if n < 4 {
        return Err(Error::Validation(format!(
            "cross-fitting needs at least 4 subjects, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(seed, &[0xf01d]));
    let mut fold_a = perm[..n / 2].to_vec();
    let mut fold_b = perm[n / 2..].to_vec();
    fold_a.sort_unstable();
    fold_b.sort_unstable();
    Ok(FoldSplit {
        fold_a,
        fold_b,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv() -> &'static str {
        "A_1,A_2,Z_1_1,Z_2_1,Y_1_1,Y_2_1\n\
         0,1,0.5,1.5,2.0,3.0\n\
         1,1,-0.5,0.25,1.0,4.0\n\
         0,0,1e-3,2,0.5,1.5\n\
         1,0,3.25,-1,2.5,2.0\n"
    }

    fn toy() -> LongitudinalDataset {
        let header: Vec<String> = toy_csv()
            .lines()
            .next()
            .unwrap()
            .split(',')
            .map(String::from)
            .collect();
        read_wide_csv(toy_csv().as_bytes(), &Schema::infer(&header).unwrap()).unwrap()
    }

    #[test]
    fn loads_toy_file_with_expected_shape() {
        let ds = toy();
        assert_eq!(ds.n_subjects(), 4);
        assert_eq!(ds.n_timepoints(), 2);
        assert_eq!(ds.n_covariates(1), 1);
        assert_eq!(ds.n_covariates(2), 1);
        assert_eq!(ds.n_outcomes(), 1);
        assert_eq!(ds.exposure(2), &[1, 1, 0, 0]);
        assert_eq!(ds.outcome(2, 1), vec![3.0, 4.0, 1.5, 2.0]);
    }

    #[test]
    fn rejects_non_binary_exposure() {
        let csv = "A_1,Z_1_1,Y_1_1\n2,0.1,1.0\n";
        let schema = Schema::infer(&["A_1".into(), "Z_1_1".into(), "Y_1_1".into()]).unwrap();
        let err = read_wide_csv(csv.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("non-binary exposure"), "{err}");
    }

    #[test]
    fn rejects_unmapped_column_by_name() {
        let csv = "A_1,Z_1_1,Y_1_1,extra\n1,0.1,1.0,5\n";
        let schema = Schema::infer(&["A_1".into(), "Z_1_1".into(), "Y_1_1".into()]).unwrap();
        let err = read_wide_csv(csv.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("'extra'"), "{err}");
    }

    #[test]
    fn rejects_missing_cell() {
        let csv = "A_1,Z_1_1,Y_1_1\n1,,1.0\n";
        let schema = Schema::infer(&["A_1".into(), "Z_1_1".into(), "Y_1_1".into()]).unwrap();
        let err = read_wide_csv(csv.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("missing value"), "{err}");
    }

    #[test]
    fn schema_json_round_trips() {
        let schema = toy().schema();
        let text = serde_json::to_string(&schema).unwrap();
        assert!(text.contains("\"A_1\":\"exposure@1\""));
        assert_eq!(Schema::from_json_str(&text).unwrap(), schema);
        assert!(Schema::from_json_str(r#"{"x": "treatment@1"}"#).is_err());
    }

    #[test]
    fn history_column_arithmetic() {
        let n = 5;
        let ds = LongitudinalDataset::new(
            vec![vec![0, 1, 0, 1, 1], vec![1, 1, 0, 0, 1]],
            vec![DMatrix::from_element(n, 3, 0.5), DMatrix::from_element(n, 3, 1.5)],
            vec![DMatrix::from_element(n, 1, 2.0), DMatrix::from_element(n, 1, 3.0)],
            None,
        )
        .unwrap();
        let h = build_history(&ds, 2, false).unwrap();
        assert_eq!(h.n_columns(), 8);
        assert_eq!(h.labels[0], ColumnLabel::Exposure { t: 1 });
        assert!(h.labels.iter().any(|l| l.to_string().starts_with("Y@1")));
        let h1 = build_history(&ds, 1, false).unwrap();
        assert_eq!(h1.n_columns(), 3);
        assert!(h1
            .labels
            .iter()
            .all(|l| matches!(l, ColumnLabel::Covariate { t: 1, .. })));
        let h2f = build_history(&ds, 2, true).unwrap();
        assert_eq!(h2f.n_columns(), 9);
        assert_eq!(h2f.exposure_column(2), Some(1));
        assert!(build_history(&ds, 3, false).is_err());
        assert!(build_history(&ds, 0, false).is_err());
    }

    #[test]
    fn baseline_columns_follow_exposures() {
        let n = 3;
        let ds = LongitudinalDataset::new(
            vec![vec![0, 1, 0], vec![1, 1, 0]],
            vec![DMatrix::from_element(n, 1, 0.5), DMatrix::from_element(n, 1, 1.5)],
            vec![DMatrix::from_element(n, 1, 2.0), DMatrix::from_element(n, 1, 3.0)],
            Some(DMatrix::from_column_slice(n, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
        )
        .unwrap();
        let h = build_history(&ds, 2, true).unwrap();
        assert_eq!(h.labels[2], ColumnLabel::Baseline { k: 1 });
        assert_eq!(h.labels[3].to_string(), "Z@0[2]");
        assert_eq!(h.matrix[(1, 3)], 5.0);
        assert_eq!(h.n_columns(), 2 + 2 + 2 + 1);
    }

    #[test]
    fn regimes_are_lexicographic() {
        let r2: Vec<Vec<u8>> = enumerate_regimes(2).iter().map(|r| r.values().to_vec()).collect();
        assert_eq!(r2, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        let r1: Vec<Vec<u8>> = enumerate_regimes(1).iter().map(|r| r.values().to_vec()).collect();
        assert_eq!(r1, vec![vec![0], vec![1]]);
        let r3 = enumerate_regimes(3);
        assert_eq!(r3.len(), 8);
        assert_eq!(r3[0].values(), &[0, 0, 0]);
        assert_eq!(r3[7].values(), &[1, 1, 1]);
        for (i, r) in r3.iter().enumerate() {
            assert_eq!(r.index(), i);
        }
    }

    #[test]
    fn suffix_enumeration() {
        let s: Vec<Vec<u8>> = enumerate_suffixes(2, 2)
            .unwrap()
            .iter()
            .map(|r| r.values().to_vec())
            .collect();
        assert_eq!(s, vec![vec![0], vec![1]]);
        assert_eq!(enumerate_suffixes(2, 1).unwrap(), enumerate_regimes(2));
        let s32 = enumerate_suffixes(3, 2).unwrap();
        assert_eq!(s32.len(), 4);
        assert!(s32.iter().all(|r| r.len() == 2 && r.start() == 2));
        assert!(enumerate_suffixes(2, 3).is_err());
    }

    #[test]
    fn fold_split_contract() {
        let a = split_subjects(100, 7).unwrap();
        let b = split_subjects(100, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fold_a.len(), 50);
        assert_eq!(a.fold_b.len(), 50);
        let odd = split_subjects(101, 7).unwrap();
        let mut sizes = [odd.fold_a.len(), odd.fold_b.len()];
        sizes.sort();
        assert_eq!(sizes, [50, 51]);
        let mut all: Vec<usize> = odd.fold_a.iter().chain(&odd.fold_b).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(split_subjects(3, 7).is_err());
        assert_ne!(split_subjects(100, 8).unwrap(), a);
    }

    #[test]
    fn select_rows_repeats_subjects() {
        let ds = toy();
        let sub = ds.select_rows(&[3, 3, 0]);
        assert_eq!(sub.n_subjects(), 3);
        assert_eq!(sub.exposure(1), &[1, 1, 0]);
        assert_eq!(sub.covariates(1)[(0, 0)], 3.25);
    }
}

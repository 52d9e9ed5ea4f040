//! Data-generating processes with counterfactual oracles, CSV ingestion and
//! train/validation/test splitting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The closed-form processes that double as ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpName {
    Simulation,
    Ihdp,
    Jobs,
    Twins,
}

impl DgpName {
    pub const ALL: [DgpName; 4] = [
        DgpName::Simulation,
        DgpName::Ihdp,
        DgpName::Jobs,
        DgpName::Twins,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DgpName::Simulation => "simulation",
            DgpName::Ihdp => "ihdp",
            DgpName::Jobs => "jobs",
            DgpName::Twins => "twins",
        }
    }

    /// Number of covariates the formulas sum over.
    pub fn covariates(self) -> usize {
        match self {
            DgpName::Simulation => 2,
            DgpName::Ihdp => 25,
            DgpName::Jobs => 17,
            DgpName::Twins => 38,
        }
    }

    /// Treatment interval used for counterfactual grids and policies.
    pub fn treatment_range(self) -> (f64, f64) {
        match self {
            DgpName::Simulation => (1.0, 3.0),
            DgpName::Ihdp => (4.0, 6.0),
            DgpName::Jobs => (5.0, 12.0),
            DgpName::Twins => (1.0, 2.0),
        }
    }

    /// Semi-synthetic processes need real covariates.
    pub fn needs_covariates(self) -> bool {
        self != DgpName::Simulation
    }

    pub fn treatment(self, x: &[f64]) -> f64 {
        match self {
            DgpName::Simulation => x.iter().map(|v| softplus(*v)).sum(),
            DgpName::Ihdp => x.iter().map(|v| (1.0 + v * v).cos()).sum(),
            DgpName::Jobs => 0.2 * x.iter().map(|v| v.sin() + (-v * v).exp()).sum::<f64>(),
            DgpName::Twins => 0.5 * x.iter().map(|v| softplus(*v)).sum::<f64>() - 15.0,
        }
    }

    pub fn short_term(self, x: &[f64], t: f64) -> f64 {
        let gauss: f64 = x.iter().map(|v| (-v * v).exp()).sum();
        match self {
            DgpName::Simulation => 0.4 * t.sin() + 0.2 * gauss + 1.0,
            DgpName::Ihdp => 2.5 * (2.0 + t).sin() + 0.25 * gauss + 1.25,
            DgpName::Jobs => 1.7 * (2.0 * t).sin() + 0.05 * x.iter().sum::<f64>() + 3.4,
            DgpName::Twins => 0.75 * t.sin() + 0.02 * gauss + 2.0,
        }
    }

    pub fn long_term(self, x: &[f64], t: f64, s: f64) -> f64 {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        match self {
            DgpName::Simulation => 0.1 * t.sqrt().exp() - 0.1 * s.cos() + 0.01 * sq + 1.0,
            // S can dip below zero on extreme covariates; the log is guarded.
            DgpName::Ihdp => 0.1 * t * t - s.max(1e-8).ln() + 2.0 * x.iter().sum::<f64>() + 5.0,
            DgpName::Jobs => {
                0.7 * t - s + 0.02 * x.iter().map(|v| (1.0 + v * v).ln()).sum::<f64>() + 5.0
            }
            DgpName::Twins => 0.2 * t.max(0.0).sqrt().exp() - 0.2 * s.cos() + 0.001 * sq + 2.0,
        }
    }

    /// (s(x, t), y(x, t, s(x, t))).
    pub fn counterfactual(self, x: &[f64], t: f64) -> (f64, f64) {
        let s = self.short_term(x, t);
        (s, self.long_term(x, t, s))
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl fmt::Display for DgpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DgpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DgpName::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownDataset(s.to_string()))
    }
}

/// Where covariates come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CovariateSource {
    /// i.i.d. uniform on `[lo, hi)` per coordinate.
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Rows of an already ingested (standardized) matrix.
    Ingested(Array2<f64>),
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgpSpec {
    pub name: DgpName,
    pub source: CovariateSource,
}

impl DgpSpec {
    pub fn simulation() -> Self {
        DgpSpec {
            name: DgpName::Simulation,
            source: CovariateSource::Uniform { lo: 0.0, hi: 2.0 },
        }
    }

    pub fn semi_synthetic(name: DgpName, covariates: Array2<f64>) -> Self {
        DgpSpec {
            name,
            source: CovariateSource::Ingested(covariates),
        }
    }
}

/// Index sets of the three partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    fn label(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

/// Observational data with an optional ground-truth process.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Array2<f64>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub dgp: Option<DgpName>,
    pub splits: Option<Splits>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        x: Array2<f64>,
        t: Vec<f64>,
        s: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        for (label, len) in [("t", t.len()), ("s", s.len()), ("y", y.len())] {
            if len != n {
                return Err(Error::dims(format!("dataset column {label}"), n, len));
            }
        }
        Ok(Dataset {
            name: name.into(),
            x,
            t,
            s,
            y,
            dgp: None,
            splits: None,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Rows at `idx`, without splits.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select(Axis(0), idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            dgp: self.dgp,
            splits: None,
            seed: self.seed,
        }
    }

    /// The rows of one partition; errors if the dataset is unsplit or the
    /// partition is empty.
    pub fn part(&self, part: Part) -> Result<Dataset> {
        let splits = self
            .splits
            .as_ref()
            .ok_or(Error::EmptySplit(part.label()))?;
        let idx = match part {
            Part::Train => &splits.train,
            Part::Val => &splits.val,
            Part::Test => &splits.test,
        };
        if idx.is_empty() {
            return Err(Error::EmptySplit(part.label()));
        }
        Ok(self.select(idx))
    }

    /// Whether the treatment takes only the values 0 and 1.
    pub fn is_binary_treatment(&self) -> bool {
        self.t.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// SHA-256 over the little-endian bytes of X, T, S, Y.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.x.iter().chain(&self.t).chain(&self.s).chain(&self.y) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self, fractions: SplitFractions) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            n: self.n(),
            m_x: self.m_x(),
            seed: self.seed,
            fractions,
            checksum: self.checksum(),
        }
    }

    /// Writes `x_1..x_m,t,s,y` with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.m_x()).map(|j| format!("x_{j}")).collect();
        header.extend(["t", "s", "y"].map(String::from));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.extend([self.t[i], self.s[i], self.y[i]].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a full `x_1..x_m,t,s,y` file. Covariates are used as stored.
    pub fn read_csv(path: impl AsRef<Path>, name: &str) -> Result<Dataset> {
        let table = read_numeric_table(path.as_ref(), None)?;
        if let Some(&row) = table.rejected.first() {
            return Err(Error::InvalidConfig(format!(
                "row {row} has missing values"
            )));
        }
        let cols = table.width;
        if cols < 4 {
            return Err(Error::ColumnMismatch {
                expected: 4,
                found: cols,
            });
        }
        let m = cols - 3;
        let n = table.rows.len();
        let x = Array2::from_shape_fn((n, m), |(i, j)| table.rows[i][j]);
        let col = |k: usize| table.rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
        Dataset::new(name, x, col(m), col(m + 1), col(m + 2))
    }
}

/// Provenance written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    pub m_x: usize,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub checksum: String,
}

/// Draws covariates and applies the process's closed-form maps.
///
/// For ingested covariates, `n` distinct rows are drawn by a seeded shuffle
/// (`n = 0` keeps every row in file order).
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.name.covariates();
    let x = match &spec.source {
        CovariateSource::Uniform { lo, hi } => {
            if n == 0 {
                return Err(Error::EmptySplit("dataset"));
            }
            Array2::from_shape_fn((n, m), |_| rng.gen_range(*lo..*hi))
        }
        CovariateSource::Ingested(cov) => {
            if cov.ncols() != m {
                return Err(Error::ColumnMismatch {
                    expected: m,
                    found: cov.ncols(),
                });
            }
            if n == 0 {
                cov.clone()
            } else if n > cov.nrows() {
                return Err(Error::InvalidConfig(format!(
                    "requested {n} rows but only {} covariate rows were ingested",
                    cov.nrows()
                )));
            } else {
                let mut idx: Vec<usize> = (0..cov.nrows()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(n);
                cov.select(Axis(0), &idx)
            }
        }
        CovariateSource::None => return Err(Error::MissingSource(spec.name.to_string())),
    };
    if x.nrows() == 0 {
        return Err(Error::EmptySplit("dataset"));
    }
    let rows = x.nrows();
    let (mut t, mut s, mut y) = (
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
    );
    for row in x.rows() {
        let xi = row.as_slice().expect("standard layout");
        let ti = spec.name.treatment(xi);
        let (si, yi) = spec.name.counterfactual(xi, ti);
        t.push(ti);
        s.push(si);
        y.push(yi);
    }
    let mut ds = Dataset::new(spec.name.as_str(), x, t, s, y)?;
    ds.dgp = Some(spec.name);
    ds.seed = seed;
    Ok(ds)
}

/// Ground truth (s, y) at `t_cf`.
pub fn counterfactual(dgp: DgpName, x: &[f64], t_cf: f64) -> (f64, f64) {
    dgp.counterfactual(x, t_cf)
}

/// Deterministic shuffled partition. Validation and test sizes are rounded
/// from the fractions and the remainder goes to training.
pub fn split(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must sum to 1, got {f:?}"
        )));
    }
    let n = ds.n();
    let n_val = (n as f64 * fractions.val).round() as usize;
    let n_test = (n as f64 * fractions.test).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    for (label, size) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::EmptySplit(label));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = ds.clone();
    out.splits = Some(Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    });
    Ok(out)
}

struct NumericTable {
    width: usize,
    rows: Vec<Vec<f64>>,
    rejected: Vec<usize>,
}

/// Parses a headered or headerless numeric CSV. A first record that does not
/// parse as numbers is treated as the header.
fn read_numeric_table(path: &Path, expected: Option<usize>) -> Result<NumericTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    let mut width = expected;
    let mut data_index = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if k == 0
            && rec
                .iter()
                .any(|f| !f.is_empty() && f.parse::<f64>().is_err())
        {
            if let Some(w) = width {
                if rec.len() != w {
                    return Err(Error::ColumnMismatch {
                        expected: w,
                        found: rec.len(),
                    });
                }
            }
            width = Some(rec.len());
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::ColumnMismatch {
                expected: w,
                found: rec.len(),
            });
        }
        let parsed: Option<Vec<f64>> = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match parsed {
            Some(r) => rows.push(r),
            None => rejected.push(data_index),
        }
        data_index += 1;
    }
    Ok(NumericTable {
        width: width.unwrap_or(0),
        rows,
        rejected,
    })
}

/// Parsed covariates plus the data-row indices dropped for missing values.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedCovariates {
    pub x: Array2<f64>,
    pub rejected: Vec<usize>,
}

/// Reads a covariate-only CSV with exactly `columns` columns and standardizes
/// each column.
pub fn ingest_covariates(path: impl AsRef<Path>, columns: usize) -> Result<IngestedCovariates> {
    let table = read_numeric_table(path.as_ref(), Some(columns))?;
    for &r in &table.rejected {
        log::warn!("covariate row {r} has missing values and was dropped");
    }
    let n = table.rows.len();
    let mut x = Array2::from_shape_fn((n, columns), |(i, j)| table.rows[i][j]);
    standardize_columns(&mut x);
    Ok(IngestedCovariates {
        x,
        rejected: table.rejected,
    })
}

/// Zero mean, unit population variance per column; constant columns are
/// left untouched.
pub fn standardize_columns(x: &mut Array2<f64>) {
    let n = x.nrows() as f64;
    if n == 0.0 {
        return;
    }
    for mut col in x.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            let sd = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / sd);
        }
    }
}

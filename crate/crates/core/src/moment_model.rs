//! Moment samples and their first- and second-moment summaries.
//!
//! A [`MomentSample`] is the n x J matrix of moment-function evaluations
//! g_j(W_i, theta) at one parameter value. Everything downstream (statistics,
//! tilting, critical values) consumes either the raw sample or its
//! [`MomentSummary`].
//!
//! Covariances use divisor n, not n - 1.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// n x J matrix of moment evaluations, rows are observations.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSample {
    values: DMatrix<f64>,
}

impl MomentSample {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (n, j) = values.shape();
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 observations, got {n}")));
        }
        if j < 1 {
            return Err(Error::InvalidInput("need at least one moment column".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let (r, c) = (pos % n, pos / n);
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, column {}",
                r + 1,
                c + 1
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let j = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != j) {
            return Err(Error::InvalidInput(format!(
                "row {} has {} entries, expected {j}",
                bad + 1,
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, j, |r, c| rows[r][c]))
    }

    /// Single-column convenience constructor.
    pub fn from_column(column: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(column.len(), 1, column))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn j(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    /// Parses comma-separated numeric data with an optional single header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut width: Option<usize> = None;
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 1;
            let record = record.map_err(|e| Error::Parse {
                row: line,
                col: 0,
                msg: e.to_string(),
            })?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let parsed: Vec<std::result::Result<f64, _>> =
                record.iter().map(str::parse::<f64>).collect();
            if idx == 0 && parsed.iter().any(|p| p.is_err()) {
                // header row
                width = Some(record.len());
                continue;
            }
            let mut row = Vec::with_capacity(parsed.len());
            for (c, p) in parsed.into_iter().enumerate() {
                match p {
                    Ok(v) if v.is_finite() => row.push(v),
                    Ok(v) => {
                        return Err(Error::Parse {
                            row: line,
                            col: c + 1,
                            msg: format!("non-finite value {v}"),
                        })
                    }
                    Err(_) => {
                        return Err(Error::Parse {
                            row: line,
                            col: c + 1,
                            msg: format!("not a number: {:?}", &record[c]),
                        })
                    }
                }
            }
            match width {
                Some(w) if w != row.len() => {
                    return Err(Error::Parse {
                        row: line,
                        col: row.len().min(w) + 1,
                        msg: format!("expected {w} fields, found {}", row.len()),
                    })
                }
                _ => width = Some(row.len()),
            }
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    /// Writes the sample as headerless CSV using round-trip float formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.j()).map(|j| format!("{}", self.get(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Mean, covariance, variances and correlation of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Diagonal of `covariance`.
    pub variances: DVector<f64>,
    pub correlation: DMatrix<f64>,
}

impl MomentSummary {
    pub fn j(&self) -> usize {
        self.mean.len()
    }

    pub fn sd(&self, j: usize) -> f64 {
        self.variances[j].sqrt()
    }

    pub fn diag_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.variances)
    }

    /// Builds a summary from a mean and covariance, deriving the rest.
    pub fn from_moments(n: usize, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let j = mean.len();
        let variances = covariance.diagonal();
        for (k, &v) in variances.iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::DegenerateColumn(k));
            }
        }
        let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
        let correlation = DMatrix::from_fn(j, j, |a, b| {
            if a == b {
                1.0
            } else {
                (covariance[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
            }
        });
        Ok(Self {
            n,
            mean,
            covariance,
            variances,
            correlation,
        })
    }
}

/// Sum that depends only on the multiset of terms, not their order.
pub(crate) fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Zero-variance test relative to the column's magnitude.
#[inline]
pub(crate) fn is_degenerate(variance: f64, magnitude: f64) -> bool {
    let floor = 64.0 * f64::EPSILON * magnitude;
    !(variance > floor * floor) || variance <= f64::MIN_POSITIVE
}

pub fn summarize(sample: &MomentSample) -> Result<MomentSummary> {
    let n = sample.n();
    let j = sample.j();
    let nf = n as f64;
    let mut buf = vec![0.0; n];
    let mut mean = DVector::zeros(j);
    for c in 0..j {
        buf.copy_from_slice(sample.column(c));
        mean[c] = order_free_sum(&mut buf) / nf;
    }
    let mut cov = DMatrix::zeros(j, j);
    for a in 0..j {
        let ca = sample.column(a);
        for b in a..j {
            let cb = sample.column(b);
            for i in 0..n {
                buf[i] = (ca[i] - mean[a]) * (cb[i] - mean[b]);
            }
            let v = order_free_sum(&mut buf) / nf;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    for c in 0..j {
        let magnitude = sample.column(c).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if is_degenerate(cov[(c, c)], magnitude) {
            return Err(Error::DegenerateColumn(c));
        }
    }
    MomentSummary::from_moments(n, mean, cov)
}

/// kappa^{-1} sqrt(n) times the studentized sample mean.
pub fn studentized_scaled_mean(summary: &MomentSummary, kappa: f64) -> Result<DVector<f64>> {
    scaled_mean_with(summary.n, &summary.mean, &summary.variances, kappa)
}

pub(crate) fn scaled_mean_with(
    n: usize,
    mean: &DVector<f64>,
    variances: &DVector<f64>,
    kappa: f64,
) -> Result<DVector<f64>> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("kappa must be positive, got {kappa}")));
    }
    let root_n = (n as f64).sqrt();
    let mut xi = DVector::zeros(mean.len());
    for j in 0..mean.len() {
        let v = variances[j];
        if !(v > 0.0) {
            return Err(Error::DegenerateColumn(j));
        }
        xi[j] = root_n * mean[j] / (v.sqrt() * kappa);
    }
    Ok(xi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Neg,
    Zero,
    Pos,
}

impl FamilyKind {
    pub fn label(self) -> &'static str {
        match self {
            FamilyKind::Neg => "Neg",
            FamilyKind::Zero => "Zero",
            FamilyKind::Pos => "Pos",
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "neg" => Ok(Self::Neg),
            "zero" => Ok(Self::Zero),
            "pos" => Ok(Self::Pos),
            other => Err(Error::InvalidInput(format!("unknown correlation family {other:?}"))),
        }
    }
}

/// Toeplitz correlation design: first row (1, rho_1, ..., rho_{J-1}).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFamily {
    pub kind: FamilyKind,
    pub rho: Vec<f64>,
}

impl CorrelationFamily {
    /// The Neg/Zero/Pos designs for J in {2, 4, 10}; Zero is defined for any J.
    pub fn standard(kind: FamilyKind, j: usize) -> Result<Self> {
        let rho: Vec<f64> = match (kind, j) {
            (_, 0) => return Err(Error::InvalidInput("J must be positive".into())),
            (FamilyKind::Zero, j) => vec![0.0; j - 1],
            (FamilyKind::Neg, 2) => vec![-0.9],
            (FamilyKind::Pos, 2) => vec![0.5],
            (FamilyKind::Neg, 4) => vec![-0.9, 0.7, -0.5],
            (FamilyKind::Pos, 4) => vec![0.9, 0.7, 0.5],
            (FamilyKind::Neg, 10) => vec![-0.9, 0.8, -0.7, 0.6, -0.5, 0.4, -0.3, 0.2, -0.1],
            (FamilyKind::Pos, 10) => vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.5, 0.5, 0.5, 0.5],
            (kind, j) => {
                return Err(Error::InvalidInput(format!(
                    "no standard {} design for J = {j}; supply rho explicitly",
                    kind.label()
                )))
            }
        };
        Ok(Self { kind, rho })
    }

    pub fn custom(kind: FamilyKind, rho: Vec<f64>) -> Self {
        Self { kind, rho }
    }

    pub fn j(&self) -> usize {
        self.rho.len() + 1
    }

    /// Minimum off-diagonal entry of the generated matrix.
    pub fn min_off_diagonal(&self) -> Option<f64> {
        self.rho.iter().copied().reduce(f64::min)
    }
}

pub fn make_toeplitz(family: &CorrelationFamily) -> Result<DMatrix<f64>> {
    let j = family.j();
    if family.rho.iter().any(|r| !r.is_finite() || r.abs() > 1.0) {
        return Err(Error::InvalidInput("correlations must lie in [-1, 1]".into()));
    }
    let m = DMatrix::from_fn(j, j, |a, b| {
        let lag = a.abs_diff(b);
        if lag == 0 {
            1.0
        } else {
            family.rho[lag - 1]
        }
    });
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(m)
}

/// Weighted mean and covariance, sum_i w_i (g_i - m)(g_i - m)^T, weights summing to one.
pub fn weighted_moments(sample: &MomentSample, weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, j) = (sample.n(), sample.j());
    debug_assert_eq!(weights.len(), n);
    let mut mean = DVector::zeros(j);
    for c in 0..j {
        mean[c] = sample
            .column(c)
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum();
    }
    let mut cov = DMatrix::zeros(j, j);
    for a in 0..j {
        let ca = sample.column(a);
        for b in a..j {
            let cb = sample.column(b);
            let v: f64 = (0..n)
                .map(|i| weights[i] * (ca[i] - mean[a]) * (cb[i] - mean[b]))
                .sum();
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

//! The MMM and AQLR test statistics.
//!
//! Both take an argument vector over the reals extended with `+inf` and a
//! variance matrix. A `+inf` coordinate marks an omitted moment: it adds
//! nothing to MMM and is deleted (row, column and entry) before the AQLR
//! quadratic program is solved.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment_model::MomentSummary;

/// Determinant floor used by the AQLR covariance adjustment.
pub const AQLR_DET_FLOOR: f64 = 0.012;

const QP_KKT_TOL: f64 = 1e-10;
const QP_ITER_PER_DIM: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum StatisticKind {
    Mmm,
    Aqlr,
}

impl StatisticKind {
    pub fn label(self) -> &'static str {
        match self {
            StatisticKind::Mmm => "MMM",
            StatisticKind::Aqlr => "AQLR",
        }
    }

    /// S(v, sigma) with n = 1, applying the AQLR determinant adjustment to
    /// `sigma` when needed.
    pub fn shifted(self, v: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
        match self {
            StatisticKind::Mmm => mmm(v, sigma, 1.0),
            StatisticKind::Aqlr => {
                let adjusted = adjust_matrix(sigma)?;
                aqlr(v, &adjusted, 1.0).map(|s| s.value)
            }
        }
    }
}

impl std::str::FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmm" | "s1" => Ok(Self::Mmm),
            "aqlr" | "s2a" => Ok(Self::Aqlr),
            other => Err(Error::InvalidInput(format!("unknown statistic {other:?}"))),
        }
    }
}

impl std::fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Argument of a test statistic: a vector over R ∪ {+inf} and a variance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedInput {
    vec: Vec<f64>,
    sigma: DMatrix<f64>,
}

impl ShiftedInput {
    pub fn new(vec: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        check_argument(&vec, &sigma)?;
        Ok(Self { vec, sigma })
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn omitted(&self) -> Vec<usize> {
        (0..self.vec.len()).filter(|&j| self.vec[j] == f64::INFINITY).collect()
    }

    pub fn mmm(&self, n: f64) -> Result<f64> {
        mmm(&self.vec, &self.sigma, n)
    }

    pub fn aqlr(&self, n: f64) -> Result<AqlrSolution> {
        aqlr(&self.vec, &self.sigma, n)
    }
}

fn check_argument(v: &[f64], sigma: &DMatrix<f64>) -> Result<()> {
    if sigma.nrows() != v.len() || sigma.ncols() != v.len() {
        return Err(Error::InvalidInput(format!(
            "argument has length {} but variance matrix is {}x{}",
            v.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if v.iter().any(|x| x.is_nan() || *x == f64::NEG_INFINITY) {
        return Err(Error::InvalidInput("statistic argument must be finite or +inf".into()));
    }
    Ok(())
}

/// n * sum over non-omitted j of min(0, v_j / sigma_j)^2.
pub fn mmm(v: &[f64], sigma: &DMatrix<f64>, n: f64) -> Result<f64> {
    check_argument(v, sigma)?;
    let mut total = 0.0;
    for (j, &x) in v.iter().enumerate() {
        if x == f64::INFINITY {
            continue;
        }
        let var = sigma[(j, j)];
        if !(var > 0.0) {
            return Err(Error::DegenerateColumn(j));
        }
        if x < 0.0 {
            let z = x / var.sqrt();
            total += z * z;
        }
    }
    Ok(n * total)
}

/// Sigma + max{0, 0.012 - det(Omega)} D for a summary's covariance.
pub fn adjust_covariance(summary: &MomentSummary) -> DMatrix<f64> {
    let det = summary.correlation.determinant();
    let bump = (AQLR_DET_FLOOR - det).max(0.0);
    let mut out = summary.covariance.clone();
    if bump > 0.0 {
        for j in 0..out.nrows() {
            out[(j, j)] += bump * summary.variances[j];
        }
    }
    out
}

/// The same adjustment for an arbitrary variance matrix.
pub fn adjust_matrix(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let j = sigma.nrows();
    let mut sd = Vec::with_capacity(j);
    for k in 0..j {
        let v = sigma[(k, k)];
        if !(v > 0.0) {
            return Err(Error::DegenerateColumn(k));
        }
        sd.push(v.sqrt());
    }
    let corr = DMatrix::from_fn(j, j, |a, b| sigma[(a, b)] / (sd[a] * sd[b]));
    let bump = (AQLR_DET_FLOOR - corr.determinant()).max(0.0);
    let mut out = sigma.clone();
    if bump > 0.0 {
        for k in 0..j {
            out[(k, k)] += bump * sigma[(k, k)];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AqlrSolution {
    /// n times the optimal quadratic form.
    pub value: f64,
    /// Minimizer t*; `+inf` at omitted coordinates.
    pub t: Vec<f64>,
    pub iterations: usize,
}

/// n * min over t >= 0 of (v - t)' sigma^{-1} (v - t).
///
/// `sigma` is used as given; callers working from data pass the adjusted
/// matrix from [`adjust_covariance`].
pub fn aqlr(v: &[f64], sigma: &DMatrix<f64>, n: f64) -> Result<AqlrSolution> {
    check_argument(v, sigma)?;
    let kept: Vec<usize> = (0..v.len()).filter(|&j| v[j] != f64::INFINITY).collect();
    let m = kept.len();
    let mut sub = vec![0.0; m * m];
    for (a, &ja) in kept.iter().enumerate() {
        for (b, &jb) in kept.iter().enumerate() {
            sub[a * m + b] = sigma[(ja, jb)];
        }
    }
    let vk: Vec<f64> = kept.iter().map(|&j| v[j]).collect();
    let mut qp = OrthantQp::new(m);
    let value = qp.solve(&vk, &sub)?;
    let mut t = vec![f64::INFINITY; v.len()];
    for (a, &j) in kept.iter().enumerate() {
        t[j] = qp.t[a];
    }
    Ok(AqlrSolution {
        value: n * value,
        t,
        iterations: qp.iterations,
    })
}

/// Data statistic T_n = S(sqrt(n) g_hat, Sigma_hat).
pub fn evaluate(kind: StatisticKind, summary: &MomentSummary) -> Result<f64> {
    let v: Vec<f64> = summary.mean.iter().copied().collect();
    let n = summary.n as f64;
    match kind {
        StatisticKind::Mmm => mmm(&v, &summary.covariance, n),
        StatisticKind::Aqlr => {
            let adjusted = adjust_covariance(summary);
            aqlr(&v, &adjusted, n).map(|s| s.value)
        }
    }
}

/// In-place Cholesky of a row-major m x m block; false if not positive definite.
pub(crate) fn cholesky_in_place(a: &mut [f64], m: usize) -> bool {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = s / d;
        }
    }
    true
}

/// Solves L L' x = b in place given the factor from [`cholesky_in_place`].
pub(crate) fn cholesky_solve(l: &[f64], m: usize, x: &mut [f64]) {
    for i in 0..m {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * m + k] * x[k];
        }
        x[i] = s / l[i * m + i];
    }
    for i in (0..m).rev() {
        let mut s = x[i];
        for k in i + 1..m {
            s -= l[k * m + i] * x[k];
        }
        x[i] = s / l[i * m + i];
    }
}

/// log det of a row-major symmetric matrix via Cholesky; None if not positive definite.
pub(crate) fn det_via_cholesky(a: &[f64], m: usize, scratch: &mut Vec<f64>) -> Option<f64> {
    scratch.clear();
    scratch.extend_from_slice(a);
    if !cholesky_in_place(scratch, m) {
        return None;
    }
    let mut det = 1.0;
    for j in 0..m {
        det *= scratch[j * m + j];
    }
    Some(det * det)
}

/// Primal active-set solver for min_{t >= 0} (v - t)' S^{-1} (v - t).
///
/// With working set W (coordinates pinned at t_j = 0) and free set F, the
/// subproblem minimizer is t_F = v_F - S_FW w with w = S_WW^{-1} v_W, so
/// only Cholesky factors of principal sub-blocks of S are needed. The
/// multipliers of the pinned bounds are -2w; optimality is w <= 0.
pub(crate) struct OrthantQp {
    m: usize,
    pub(crate) t: Vec<f64>,
    pub(crate) w: Vec<f64>,
    pub(crate) working: Vec<bool>,
    pub(crate) iterations: usize,
    idx: Vec<usize>,
    block: Vec<f64>,
    rhs: Vec<f64>,
    target: Vec<f64>,
}

impl OrthantQp {
    pub(crate) fn new(m: usize) -> Self {
        Self {
            m,
            t: vec![0.0; m],
            w: vec![0.0; m],
            working: vec![false; m],
            iterations: 0,
            idx: Vec::with_capacity(m),
            block: Vec::with_capacity(m * m),
            rhs: Vec::with_capacity(m),
            target: vec![0.0; m],
        }
    }

    fn resize(&mut self, m: usize) {
        self.m = m;
        self.t.resize(m, 0.0);
        self.w.resize(m, 0.0);
        self.working.resize(m, false);
        self.target.resize(m, 0.0);
    }

    /// Subproblem minimizer for the current working set, written to `target`;
    /// multipliers written to `w` (zero off the working set).
    fn equality_step(&mut self, v: &[f64], s: &[f64]) -> Result<()> {
        let m = self.m;
        self.idx.clear();
        self.idx.extend((0..m).filter(|&j| self.working[j]));
        let k = self.idx.len();
        self.w.iter_mut().for_each(|x| *x = 0.0);
        if k == 0 {
            self.target.copy_from_slice(v);
            return Ok(());
        }
        self.block.clear();
        for &a in &self.idx {
            for &b in &self.idx {
                self.block.push(s[a * m + b]);
            }
        }
        if !cholesky_in_place(&mut self.block, k) {
            return Err(Error::SingularCovariance);
        }
        self.rhs.clear();
        self.rhs.extend(self.idx.iter().map(|&a| v[a]));
        cholesky_solve(&self.block, k, &mut self.rhs);
        for (p, &a) in self.idx.iter().enumerate() {
            self.w[a] = self.rhs[p];
        }
        for j in 0..m {
            if self.working[j] {
                self.target[j] = 0.0;
            } else {
                let mut acc = 0.0;
                for (p, &a) in self.idx.iter().enumerate() {
                    acc += s[j * m + a] * self.rhs[p];
                }
                self.target[j] = v[j] - acc;
            }
        }
        Ok(())
    }

    /// Returns the optimal value (without the n factor); minimizer in `self.t`.
    pub(crate) fn solve(&mut self, v: &[f64], s: &[f64]) -> Result<f64> {
        let m = v.len();
        self.resize(m);
        self.iterations = 0;
        if m == 0 {
            return Ok(0.0);
        }
        for j in 0..m {
            if !(s[j * m + j] > 0.0) {
                return Err(Error::SingularCovariance);
            }
            self.working[j] = v[j] <= 0.0;
            self.t[j] = v[j].max(0.0);
        }
        let cap = QP_ITER_PER_DIM * m;
        loop {
            if self.iterations >= cap {
                return Err(Error::QpNoConvergence {
                    iterations: self.iterations,
                });
            }
            self.iterations += 1;
            self.equality_step(v, s)?;

            // Longest feasible step towards the subproblem minimizer.
            let mut alpha = 1.0;
            let mut blocking = None;
            for j in 0..m {
                if !self.working[j] && self.target[j] < 0.0 {
                    let denom = self.t[j] - self.target[j];
                    let ratio = if denom > 0.0 { self.t[j] / denom } else { 0.0 };
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(j);
                    }
                }
            }
            match blocking {
                Some(b) => {
                    for j in 0..m {
                        if !self.working[j] {
                            self.t[j] += alpha * (self.target[j] - self.t[j]);
                        }
                    }
                    self.t[b] = 0.0;
                    self.working[b] = true;
                }
                None => {
                    for j in 0..m {
                        self.t[j] = if self.working[j] { 0.0 } else { self.target[j].max(0.0) };
                    }
                    let scale = 1.0 + self.w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                    let mut release = None;
                    let mut worst = QP_KKT_TOL * scale;
                    for j in 0..m {
                        if self.working[j] && self.w[j] > worst {
                            worst = self.w[j];
                            release = Some(j);
                        }
                    }
                    match release {
                        Some(j) => self.working[j] = false,
                        None => {
                            let value: f64 = (0..m)
                                .filter(|&j| self.working[j])
                                .map(|j| self.w[j] * v[j])
                                .sum();
                            return Ok(value.max(0.0));
                        }
                    }
                }
            }
        }
    }
}

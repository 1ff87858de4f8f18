//! Critical values for GMS, CMS, RSW and RMS, and the accept/reject decision.
//!
//! All procedures evaluate the same kind of draw: a recentered, studentized
//! vector G*, a correlation matrix and per-moment scales. A [`DrawSet`] holds
//! either asymptotic normal draws (G* = L Z with L L' = Omega_hat) or
//! nonparametric bootstrap draws. A [`TestContext`] generates one draw set
//! per (sample, seed) and serves every procedure and statistic from it, so
//! all comparisons within a context use common random numbers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::el_tilt::{self, TiltDiagnostics, TiltOutcome};
use crate::error::{Error, Result};
use crate::moment_model::{self, MomentSample, MomentSummary};
use crate::rng::Substream;
use crate::selection::{KappaSchedule, SelectionRule, SelectionVector};
use crate::test_statistics::{cholesky_in_place, det_via_cholesky, OrthantQp, StatisticKind, AQLR_DET_FLOOR};

pub const MIN_DRAWS: usize = 100;
/// Largest share of bootstrap replicates that may be skipped as degenerate.
pub const MAX_SKIPPED_SHARE: f64 = 0.01;
pub const DEFAULT_BOOTSTRAP_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GMS")]
    Gms,
    #[serde(rename = "CMS")]
    Cms,
    #[serde(rename = "CMS_FC")]
    CmsFc,
    #[serde(rename = "RSW")]
    Rsw,
    #[serde(rename = "RMS")]
    Rms,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Gms, Method::Cms, Method::CmsFc, Method::Rsw, Method::Rms];

    pub fn label(self) -> &'static str {
        match self {
            Method::Gms => "GMS",
            Method::Cms => "CMS",
            Method::CmsFc => "CMS_FC",
            Method::Rsw => "RSW",
            Method::Rms => "RMS",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gms" => Ok(Method::Gms),
            "cms" => Ok(Method::Cms),
            "cms-fc" => Ok(Method::CmsFc),
            "rsw" => Ok(Method::Rsw),
            "rms" => Ok(Method::Rms),
            other => Err(Error::InvalidInput(format!("unknown procedure {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    AsymptoticSim,
    Bootstrap,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asym" | "asymptotic" => Ok(Mode::AsymptoticSim),
            "boot" | "bootstrap" => Ok(Mode::Bootstrap),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// First-stage output of the two-step RSW procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RswSupplement {
    pub beta: f64,
    /// beta-quantile of min_j of the studentized recentered draws.
    pub rectangle_bound: f64,
    /// Lower endpoints g_hat_j + sigma_hat_j K / sqrt(n) of the rectangle.
    pub lower_endpoints: Vec<f64>,
    pub lambda_star: Vec<f64>,
    /// The rectangle leaves the nonnegative orthant.
    pub first_stage: bool,
    /// Every lambda*_j is zero, so no moment was moved out of play.
    pub no_omission: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalValueReport {
    /// Critical value including `correction`.
    pub value: f64,
    pub method: Method,
    pub mode: Mode,
    pub draws: usize,
    pub selection: SelectionVector,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplementary: Option<RswSupplement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt: Option<TiltDiagnostics>,
    /// CMS fell back to the sample-mean selection because the tilt was infeasible.
    #[serde(default)]
    pub tilt_fallback: bool,
    #[serde(default)]
    pub skipped_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestDecision {
    pub statistic: f64,
    pub critical_value: CriticalValueReport,
    pub reject: bool,
    /// RSW only: whether the first-stage rectangle leaves the orthant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_stage: Option<bool>,
}

/// Order statistic at index ceil(level * R) of the draws (1-based).
pub fn empirical_quantile(values: &mut [f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty draw set".into()));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Domain(format!("quantile level must be in (0, 1], got {level}")));
    }
    let r = values.len();
    let k = ((level * r as f64 - 1e-9).ceil() as usize).clamp(1, r);
    let (_, v, _) = values.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*v)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in (0, 0.5), got {alpha}")))
    }
}

fn check_draws(count: usize) -> Result<()> {
    if count >= MIN_DRAWS {
        Ok(())
    } else {
        Err(Error::Domain(format!("need at least {MIN_DRAWS} draws, got {count}")))
    }
}

/// max{0, 0.012 - det} for a row-major correlation matrix.
fn det_bump(omega: &[f64], j: usize, scratch: &mut Vec<f64>) -> f64 {
    let det = match det_via_cholesky(omega, j, scratch) {
        Some(d) => d,
        None => DMatrix::from_row_slice(j, j, omega).determinant(),
    };
    (AQLR_DET_FLOOR - det).max(0.0)
}

/// Simulated or bootstrapped draws of the recentered studentized moment vector.
#[derive(Clone, Debug)]
pub struct DrawSet {
    mode: Mode,
    j: usize,
    count: usize,
    /// count x j
    centered: Vec<f64>,
    /// count x j for bootstrap draws, a single j-vector otherwise
    sd: Vec<f64>,
    /// count x j x j row-major for bootstrap draws, a single matrix otherwise
    omega: Vec<f64>,
    /// AQLR diagonal bump per matrix in `omega`
    bump: Vec<f64>,
    skipped: usize,
}

struct Evaluator {
    qp: OrthantQp,
    v: Vec<f64>,
    kept: Vec<f64>,
    sub: Vec<f64>,
}

impl Evaluator {
    fn new(j: usize) -> Self {
        Self {
            qp: OrthantQp::new(j),
            v: vec![0.0; j],
            kept: Vec::with_capacity(j),
            sub: Vec::with_capacity(j * j),
        }
    }

    /// S(v, omega) with n = 1 for a correlation-scale argument in `self.v`.
    fn statistic(&mut self, kind: StatisticKind, omega: &[f64], bump: f64) -> Result<f64> {
        let j = self.v.len();
        match kind {
            StatisticKind::Mmm => Ok(self
                .v
                .iter()
                .filter(|x| **x < 0.0)
                .map(|x| x * x)
                .sum()),
            StatisticKind::Aqlr => {
                if self.v.iter().all(|x| *x >= 0.0) {
                    return Ok(0.0);
                }
                self.kept.clear();
                self.sub.clear();
                let idx: Vec<usize> = (0..j).filter(|&a| self.v[a] != f64::INFINITY).collect();
                for &a in &idx {
                    self.kept.push(self.v[a]);
                    for &b in &idx {
                        let extra = if a == b { bump } else { 0.0 };
                        self.sub.push(omega[a * j + b] + extra);
                    }
                }
                self.qp.solve(&self.kept, &self.sub)
            }
        }
    }
}

impl DrawSet {
    /// R draws of L Z with L the Cholesky factor of `omega`; draw r uses
    /// substream (seed, r).
    pub fn asymptotic(omega: &DMatrix<f64>, sd: &[f64], count: usize, seed: u64) -> Result<Self> {
        let j = omega.nrows();
        let chol = omega.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let l = chol.l();
        let l = &l;
        let root = Substream::root(seed);
        let centered: Vec<f64> = (0..count)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut rng = root.child(r as u64).rng();
                let z: Vec<f64> = (0..j).map(|_| rng.sample(StandardNormal)).collect();
                (0..j).map(move |a| (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>())
            })
            .collect();
        let omega_rm: Vec<f64> = (0..j * j).map(|k| omega[(k / j, k % j)]).collect();
        let mut scratch = Vec::new();
        let bump = vec![det_bump(&omega_rm, j, &mut scratch)];
        Ok(Self {
            mode: Mode::AsymptoticSim,
            j,
            count,
            centered,
            sd: sd.to_vec(),
            omega: omega_rm,
            bump,
            skipped: 0,
        })
    }

    /// B nonparametric bootstrap draws; draw b resamples rows with substream
    /// (seed, b). Replicates with a degenerate column are skipped.
    pub fn bootstrap(sample: &MomentSample, summary: &MomentSummary, count: usize, seed: u64) -> Result<Self> {
        let (n, j) = (sample.n(), sample.j());
        let nf = n as f64;
        let root_n = nf.sqrt();
        let tri = j * (j + 1) / 2;
        let width = j + tri;
        // n x (j + tri), column-major: columns centred at the sample mean,
        // then the products of pairs of centred columns
        let mut h = vec![0.0; n * width];
        for a in 0..j {
            for (i, x) in sample.column(a).iter().enumerate() {
                h[a * n + i] = x - summary.mean[a];
            }
        }
        let mut k = j;
        for a in 0..j {
            for b in a..j {
                for i in 0..n {
                    h[k * n + i] = h[a * n + i] * h[b * n + i];
                }
                k += 1;
            }
        }
        let magnitude: Vec<f64> = (0..j)
            .map(|c| sample.column(c).iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .collect();
        let root = Substream::root(seed);
        let pick = Uniform::new(0u32, n as u32).map_err(|e| Error::InvalidInput(e.to_string()))?;

        struct Draw {
            centered: Vec<f64>,
            sd: Vec<f64>,
            omega: Vec<f64>,
            bump: f64,
        }
        // resampling counts of a block of draws times h gives every
        // bootstrap sum in one matrix product
        const BLOCK: usize = 64;
        let blocks: Vec<(usize, usize)> = (0..count)
            .step_by(BLOCK)
            .map(|start| (start, (start + BLOCK).min(count)))
            .collect();
        let draws: Vec<Option<Draw>> = blocks
            .into_par_iter()
            .flat_map_iter(|(start, end)| {
                let rows = end - start;
                let mut counts = vec![0.0; rows * n];
                for r in 0..rows {
                    let mut rng = root.child((start + r) as u64).rng();
                    let row = &mut counts[r * n..(r + 1) * n];
                    for _ in 0..n {
                        row[rng.sample(pick) as usize] += 1.0;
                    }
                }
                let mut sums = vec![0.0; rows * width];
                // SAFETY: the three buffers hold rows x n, n x width and
                // rows x width elements with the strides given.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        n,
                        width,
                        1.0,
                        counts.as_ptr(),
                        n as isize,
                        1,
                        h.as_ptr(),
                        1,
                        n as isize,
                        0.0,
                        sums.as_mut_ptr(),
                        width as isize,
                        1,
                    );
                }
                let mut scratch = Vec::new();
                (0..rows)
                    .map(|r| {
                        let mean: Vec<f64> = (0..j).map(|a| sums[r * width + a] / nf).collect();
                        let mut cov = vec![0.0; j * j];
                        let mut k = j;
                        for a in 0..j {
                            for c in a..j {
                                let v = sums[r * width + k] / nf - mean[a] * mean[c];
                                cov[a * j + c] = v;
                                cov[c * j + a] = v;
                                k += 1;
                            }
                        }
                        let mut sd = vec![0.0; j];
                        for a in 0..j {
                            if moment_model::is_degenerate(cov[a * j + a], magnitude[a]) {
                                return None;
                            }
                            sd[a] = cov[a * j + a].sqrt();
                        }
                        let mut omega = cov;
                        for a in 0..j {
                            for c in 0..j {
                                omega[a * j + c] = if a == c {
                                    1.0
                                } else {
                                    (omega[a * j + c] / (sd[a] * sd[c])).clamp(-1.0, 1.0)
                                };
                            }
                        }
                        let centered = (0..j).map(|a| root_n * mean[a] / sd[a]).collect();
                        let bump = det_bump(&omega, j, &mut scratch);
                        Some(Draw {
                            centered,
                            sd,
                            omega,
                            bump,
                        })
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        let skipped = draws.iter().filter(|d| d.is_none()).count();
        if skipped as f64 > MAX_SKIPPED_SHARE * count as f64 {
            return Err(Error::TooManyDegenerate { skipped, total: count });
        }
        let kept = count - skipped;
        let mut out = Self {
            mode: Mode::Bootstrap,
            j,
            count: kept,
            centered: Vec::with_capacity(kept * j),
            sd: Vec::with_capacity(kept * j),
            omega: Vec::with_capacity(kept * j * j),
            bump: Vec::with_capacity(kept),
            skipped,
        };
        for d in draws.into_iter().flatten() {
            out.centered.extend(d.centered);
            out.sd.extend(d.sd);
            out.omega.extend(d.omega);
            out.bump.push(d.bump);
        }
        Ok(out)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn j(&self) -> usize {
        self.j
    }

    /// Number of usable draws.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Recentered studentized vector of draw b.
    pub fn centered(&self, b: usize) -> &[f64] {
        &self.centered[b * self.j..(b + 1) * self.j]
    }

    /// Per-moment standard deviations used by draw b.
    pub fn sd(&self, b: usize) -> &[f64] {
        match self.mode {
            Mode::Bootstrap => &self.sd[b * self.j..(b + 1) * self.j],
            Mode::AsymptoticSim => &self.sd,
        }
    }

    /// Correlation matrix (row-major) used by draw b.
    pub fn omega(&self, b: usize) -> &[f64] {
        let jj = self.j * self.j;
        match self.mode {
            Mode::Bootstrap => &self.omega[b * jj..(b + 1) * jj],
            Mode::AsymptoticSim => &self.omega,
        }
    }

    fn bump(&self, b: usize) -> f64 {
        match self.mode {
            Mode::Bootstrap => self.bump[b],
            Mode::AsymptoticSim => self.bump[0],
        }
    }

    /// S(G*_b + shift_b, Omega_b) for every draw; `shift(b, j)` gives the shift.
    pub fn evaluate<F>(&self, kind: StatisticKind, shift: F) -> Result<Vec<f64>>
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        let j = self.j;
        (0..self.count)
            .into_par_iter()
            .map_init(
                || Evaluator::new(j),
                |ev, b| {
                    let g = self.centered(b);
                    for a in 0..j {
                        ev.v[a] = g[a] + shift(b, a);
                    }
                    ev.statistic(kind, self.omega(b), self.bump(b))
                },
            )
            .collect()
    }

    /// Draw values S(G*_b + phi, Omega_b) for a fixed selection vector.
    pub fn selection_values(&self, kind: StatisticKind, selection: &SelectionVector) -> Result<Vec<f64>> {
        if selection.len() != self.j {
            return Err(Error::InvalidInput(format!(
                "selection has length {} but draws have J = {}",
                selection.len(),
                self.j
            )));
        }
        let shifts = &selection.shifts;
        self.evaluate(kind, |_, a| shifts[a])
    }

    pub fn selection_quantile(&self, kind: StatisticKind, selection: &SelectionVector, level: f64) -> Result<f64> {
        let mut values = self.selection_values(kind, selection)?;
        empirical_quantile(&mut values, level)
    }
}

/// GMS critical value from asymptotic normal simulation.
pub fn gms_asymptotic(
    summary: &MomentSummary,
    selection: &SelectionVector,
    kind: StatisticKind,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<CriticalValueReport> {
    check_alpha(alpha)?;
    check_draws(draws)?;
    let sd: Vec<f64> = summary.variances.iter().map(|v| v.sqrt()).collect();
    let set = DrawSet::asymptotic(&summary.correlation, &sd, draws, seed)?;
    let value = set.selection_quantile(kind, selection, 1.0 - alpha)?;
    Ok(plain_report(value, Method::Gms, &set, selection.clone(), alpha))
}

/// GMS critical value from the nonparametric bootstrap.
pub fn gms_bootstrap(
    sample: &MomentSample,
    selection: &SelectionVector,
    kind: StatisticKind,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<CriticalValueReport> {
    check_alpha(alpha)?;
    check_draws(draws)?;
    let summary = moment_model::summarize(sample)?;
    let set = DrawSet::bootstrap(sample, &summary, draws, seed)?;
    let value = set.selection_quantile(kind, selection, 1.0 - alpha)?;
    Ok(plain_report(value, Method::Gms, &set, selection.clone(), alpha))
}

fn plain_report(value: f64, method: Method, set: &DrawSet, selection: SelectionVector, alpha: f64) -> CriticalValueReport {
    CriticalValueReport {
        value,
        method,
        mode: set.mode(),
        draws: set.len() + set.skipped(),
        selection,
        alpha,
        kappa: None,
        supplementary: None,
        correction: None,
        tilt: None,
        tilt_fallback: false,
        skipped_draws: set.skipped(),
    }
}

/// Piecewise-linear lookup tables for the refined selection procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsTables {
    pub delta_grid: Vec<f64>,
    pub kappa: Vec<f64>,
    pub eta1: Vec<f64>,
    /// Keyed by J written in decimal.
    #[serde(rename = "eta2_by_J")]
    pub eta2_by_j: BTreeMap<String, f64>,
}

impl RmsTables {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tables: RmsTables = serde_json::from_str(&text)?;
        tables.validate()?;
        Ok(tables)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.delta_grid.len();
        if m == 0 || self.kappa.len() != m || self.eta1.len() != m {
            return Err(Error::MissingTable(
                "delta_grid, kappa and eta1 must be nonempty and of equal length".into(),
            ));
        }
        if self.delta_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("delta_grid must be strictly increasing".into()));
        }
        if self.kappa.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidInput("kappa table entries must be positive".into()));
        }
        Ok(())
    }

    fn interpolate(&self, values: &[f64], delta: f64) -> f64 {
        let grid = &self.delta_grid;
        if delta <= grid[0] {
            return values[0];
        }
        let last = grid.len() - 1;
        if delta >= grid[last] {
            return values[last];
        }
        let k = grid.partition_point(|g| *g <= delta);
        let (x0, x1) = (grid[k - 1], grid[k]);
        let w = (delta - x0) / (x1 - x0);
        values[k - 1] + w * (values[k] - values[k - 1])
    }

    pub fn kappa_at(&self, delta: f64) -> f64 {
        self.interpolate(&self.kappa, delta)
    }

    pub fn eta1_at(&self, delta: f64) -> f64 {
        self.interpolate(&self.eta1, delta)
    }

    pub fn eta2(&self, j: usize) -> Result<f64> {
        self.eta2_by_j
            .get(&j.to_string())
            .copied()
            .ok_or_else(|| Error::MissingTable(format!("eta2 has no entry for J = {j}")))
    }
}

/// Smallest off-diagonal entry of a correlation matrix.
pub fn min_off_diagonal(omega: &DMatrix<f64>) -> Result<f64> {
    let j = omega.nrows();
    if j < 2 {
        return Err(Error::Domain("min off-diagonal correlation needs J >= 2".into()));
    }
    let mut m = f64::INFINITY;
    for a in 0..j {
        for b in 0..j {
            if a != b {
                m = m.min(omega[(a, b)]);
            }
        }
    }
    Ok(m)
}

/// Everything that determines a single test apart from the data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub statistic: StatisticKind,
    pub procedure: Method,
    /// Selection rule index 1..=5.
    #[serde(default = "default_phi")]
    pub phi: u8,
    #[serde(default)]
    pub kappa: KappaSchedule,
    pub mode: Mode,
    pub alpha: f64,
    pub draws: usize,
    /// RSW first-stage level; alpha / 10 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_tables: Option<RmsTables>,
}

fn default_phi() -> u8 {
    1
}

impl TestConfig {
    pub fn new(statistic: StatisticKind, procedure: Method) -> Self {
        Self {
            statistic,
            procedure,
            phi: 1,
            kappa: KappaSchedule::SqrtLogN,
            mode: Mode::Bootstrap,
            alpha: 0.05,
            draws: DEFAULT_BOOTSTRAP_DRAWS,
            beta: None,
            rms_tables: None,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(self.alpha / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_draws(self.draws)?;
        SelectionRule::from_index(self.phi, self.statistic)?;
        if self.procedure == Method::Rsw {
            let beta = self.beta();
            if !(beta > 0.0 && beta < self.alpha) {
                return Err(Error::Domain(format!("beta must lie in (0, alpha), got {beta}")));
            }
        }
        if self.procedure == Method::Rms {
            match &self.rms_tables {
                Some(t) => t.validate()?,
                None => {
                    return Err(Error::MissingTable(
                        "RMS needs kappa/eta tables (pass --rms-tables)".into(),
                    ))
                }
            }
        }
        if let KappaSchedule::Fixed(_) = self.kappa {
            self.kappa.kappa(2)?;
        }
        Ok(())
    }
}

/// One data set with its draws; every procedure and statistic evaluated
/// through the same context shares the draws.
pub struct TestContext<'a> {
    sample: &'a MomentSample,
    summary: MomentSummary,
    mode: Mode,
    draw_count: usize,
    seed: u64,
    draws: Option<DrawSet>,
    tilt: Option<TiltOutcome>,
    cache: HashMap<(StatisticKind, Vec<u64>), Vec<f64>>,
}

impl<'a> TestContext<'a> {
    pub fn new(sample: &'a MomentSample, mode: Mode, draws: usize, seed: u64) -> Result<Self> {
        let summary = moment_model::summarize(sample)?;
        Ok(Self::with_summary(sample, summary, mode, draws, seed))
    }

    pub fn with_summary(sample: &'a MomentSample, summary: MomentSummary, mode: Mode, draws: usize, seed: u64) -> Self {
        Self {
            sample,
            summary,
            mode,
            draw_count: draws,
            seed,
            draws: None,
            tilt: None,
            cache: HashMap::new(),
        }
    }

    pub fn summary(&self) -> &MomentSummary {
        &self.summary
    }

    pub fn sample(&self) -> &MomentSample {
        self.sample
    }

    pub fn draws(&mut self) -> Result<&DrawSet> {
        if self.draws.is_none() {
            let set = match self.mode {
                Mode::AsymptoticSim => {
                    let sd: Vec<f64> = self.summary.variances.iter().map(|v| v.sqrt()).collect();
                    DrawSet::asymptotic(&self.summary.correlation, &sd, self.draw_count, self.seed)?
                }
                Mode::Bootstrap => DrawSet::bootstrap(self.sample, &self.summary, self.draw_count, self.seed)?,
            };
            self.draws = Some(set);
        }
        Ok(self.draws.as_ref().expect("draws generated above"))
    }

    pub fn tilt(&mut self) -> Result<&TiltOutcome> {
        if self.tilt.is_none() {
            self.tilt = Some(el_tilt::tilt_with_summary(self.sample, &self.summary)?);
        }
        Ok(self.tilt.as_ref().expect("tilt computed above"))
    }

    /// T_n for the data.
    pub fn statistic(&self, kind: StatisticKind) -> Result<f64> {
        crate::test_statistics::evaluate(kind, &self.summary)
    }

    /// Draw values for a fixed selection, computed once per (statistic, selection).
    pub fn selection_values(&mut self, kind: StatisticKind, selection: &SelectionVector) -> Result<&[f64]> {
        let key = (kind, selection.shifts.iter().map(|s| s.to_bits()).collect::<Vec<_>>());
        if !self.cache.contains_key(&key) {
            let values = self.draws()?.selection_values(kind, selection)?;
            self.cache.insert(key.clone(), values);
        }
        Ok(&self.cache[&key])
    }

    fn quantile(&mut self, kind: StatisticKind, selection: &SelectionVector, level: f64) -> Result<f64> {
        let mut values = self.selection_values(kind, selection)?.to_vec();
        empirical_quantile(&mut values, level)
    }

    fn report(&mut self, value: f64, method: Method, selection: SelectionVector, alpha: f64) -> Result<CriticalValueReport> {
        let set = self.draws()?;
        Ok(plain_report(value, method, set, selection, alpha))
    }

    /// GMS selection vector phi(xi_hat, Omega_hat).
    pub fn gms_selection(&self, rule: &SelectionRule, kappa: f64) -> Result<SelectionVector> {
        let xi = moment_model::studentized_scaled_mean(&self.summary, kappa)?;
        rule.apply(&xi, &self.summary.correlation)
    }

    /// CMS selection vector; the flag reports a fallback to the GMS selection.
    pub fn cms_selection(
        &mut self,
        rule: &SelectionRule,
        kappa: f64,
        fully_constrained: bool,
    ) -> Result<(SelectionVector, TiltDiagnostics, bool)> {
        let tilt = self.tilt()?.clone();
        let diagnostics = tilt.diagnostics();
        match tilt {
            TiltOutcome::Solved(r) => {
                let selection = if fully_constrained {
                    let (xi, omega) = r.xi_fully_constrained(kappa)?;
                    rule.apply(&xi, &omega)?
                } else {
                    rule.apply(&r.xi(&self.summary, kappa)?, &self.summary.correlation)?
                };
                Ok((selection, diagnostics, false))
            }
            TiltOutcome::Infeasible => {
                log::debug!("tilt infeasible; CMS uses the sample-mean selection");
                Ok((self.gms_selection(rule, kappa)?, diagnostics, true))
            }
        }
    }

    pub fn gms(&mut self, kind: StatisticKind, rule: &SelectionRule, kappa: f64, alpha: f64) -> Result<CriticalValueReport> {
        check_alpha(alpha)?;
        let selection = self.gms_selection(rule, kappa)?;
        let value = self.quantile(kind, &selection, 1.0 - alpha)?;
        let mut report = self.report(value, Method::Gms, selection, alpha)?;
        report.kappa = Some(kappa);
        Ok(report)
    }

    pub fn cms(
        &mut self,
        kind: StatisticKind,
        rule: &SelectionRule,
        kappa: f64,
        alpha: f64,
        fully_constrained: bool,
    ) -> Result<CriticalValueReport> {
        check_alpha(alpha)?;
        let (selection, diagnostics, fallback) = self.cms_selection(rule, kappa, fully_constrained)?;
        let value = self.quantile(kind, &selection, 1.0 - alpha)?;
        let method = if fully_constrained { Method::CmsFc } else { Method::Cms };
        let mut report = self.report(value, method, selection, alpha)?;
        report.kappa = Some(kappa);
        report.tilt = Some(diagnostics);
        report.tilt_fallback = fallback;
        Ok(report)
    }

    /// RSW two-step critical value; the first-stage outcome is in `supplementary`.
    pub fn rsw(&mut self, kind: StatisticKind, alpha: f64, beta: f64) -> Result<CriticalValueReport> {
        check_alpha(alpha)?;
        if !(beta > 0.0 && beta < alpha) {
            return Err(Error::Domain(format!("beta must lie in (0, alpha), got {beta}")));
        }
        let n = self.summary.n as f64;
        let root_n = n.sqrt();
        let j = self.summary.j();
        let mean = self.summary.mean.clone();
        let sd_hat: Vec<f64> = (0..j).map(|a| self.summary.sd(a)).collect();
        let set = self.draws()?;
        let mut minima: Vec<f64> = (0..set.len())
            .map(|b| set.centered(b).iter().fold(f64::INFINITY, |m, g| m.min(-g)))
            .collect();
        let bound = empirical_quantile(&mut minima, beta)?;
        let lower: Vec<f64> = (0..j).map(|a| mean[a] + sd_hat[a] * bound / root_n).collect();
        let lambda: Vec<f64> = lower.iter().map(|l| l.max(0.0)).collect();
        let first_stage = lower.iter().any(|l| *l < 0.0);
        let no_omission = lambda.iter().all(|l| *l == 0.0);
        let mut values = set.evaluate(kind, |b, a| root_n * lambda[a] / set.sd(b)[a])?;
        let value = empirical_quantile(&mut values, 1.0 - alpha + beta)?;
        let mut report = plain_report(value, Method::Rsw, set, SelectionVector::new(lambda.clone()), alpha);
        report.supplementary = Some(RswSupplement {
            beta,
            rectangle_bound: bound,
            lower_endpoints: lower,
            lambda_star: lambda,
            first_stage,
            no_omission,
        });
        Ok(report)
    }

    /// GMS with data-driven kappa and an additive size correction from tables.
    pub fn rms(
        &mut self,
        kind: StatisticKind,
        rule: &SelectionRule,
        alpha: f64,
        tables: Option<&RmsTables>,
    ) -> Result<CriticalValueReport> {
        let tables = tables.ok_or_else(|| Error::MissingTable("RMS needs kappa/eta tables".into()))?;
        tables.validate()?;
        let delta = min_off_diagonal(&self.summary.correlation)?;
        let kappa = tables.kappa_at(delta);
        let eta = tables.eta1_at(delta) + tables.eta2(self.summary.j())?;
        let mut report = self.gms(kind, rule, kappa, alpha)?;
        report.method = Method::Rms;
        report.value += eta;
        report.correction = Some(eta);
        Ok(report)
    }

    /// Critical value for a configured procedure.
    pub fn critical_value(&mut self, config: &TestConfig) -> Result<CriticalValueReport> {
        let rule = SelectionRule::from_index(config.phi, config.statistic)?;
        let kind = config.statistic;
        match config.procedure {
            Method::Gms => {
                let kappa = config.kappa.kappa(self.summary.n)?;
                self.gms(kind, &rule, kappa, config.alpha)
            }
            Method::Cms | Method::CmsFc => {
                let kappa = config.kappa.kappa(self.summary.n)?;
                self.cms(kind, &rule, kappa, config.alpha, config.procedure == Method::CmsFc)
            }
            Method::Rsw => self.rsw(kind, config.alpha, config.beta()),
            Method::Rms => self.rms(kind, &rule, config.alpha, config.rms_tables.as_ref()),
        }
    }

    /// Full decision: reject iff T_n exceeds the critical value (and, for
    /// RSW, the first stage leaves the orthant).
    pub fn decide(&mut self, config: &TestConfig) -> Result<TestDecision> {
        let statistic = self.statistic(config.statistic)?;
        let report = self.critical_value(config)?;
        Ok(decision(statistic, report, 0.0))
    }
}

/// Applies the rejection rule with an additive shift `extra` on the critical value.
pub fn decision(statistic: f64, critical_value: CriticalValueReport, extra: f64) -> TestDecision {
    let first_stage = critical_value.supplementary.as_ref().map(|s| s.first_stage);
    let reject = statistic > critical_value.value + extra && first_stage.unwrap_or(true);
    TestDecision {
        statistic,
        critical_value,
        reject,
        first_stage,
    }
}

/// Validates the configuration and runs one test on `sample`.
pub fn run_test(sample: &MomentSample, config: &TestConfig, seed: u64) -> Result<TestDecision> {
    config.validate()?;
    let mut ctx = TestContext::new(sample, config.mode, config.draws, seed)?;
    ctx.decide(config)
}

/// CMS critical value in either mode.
#[allow(clippy::too_many_arguments)]
pub fn cms_critical_value(
    sample: &MomentSample,
    kind: StatisticKind,
    rule: &SelectionRule,
    kappa: KappaSchedule,
    mode: Mode,
    alpha: f64,
    draws: usize,
    seed: u64,
    fully_constrained: bool,
) -> Result<CriticalValueReport> {
    check_draws(draws)?;
    let mut ctx = TestContext::new(sample, mode, draws, seed)?;
    let k = kappa.kappa(sample.n())?;
    ctx.cms(kind, rule, k, alpha, fully_constrained)
}

/// RSW two-step test with bootstrap draws.
pub fn rsw_test(
    sample: &MomentSample,
    kind: StatisticKind,
    alpha: f64,
    beta: Option<f64>,
    draws: usize,
    seed: u64,
) -> Result<TestDecision> {
    check_draws(draws)?;
    let mut ctx = TestContext::new(sample, Mode::Bootstrap, draws, seed)?;
    let statistic = ctx.statistic(kind)?;
    let report = ctx.rsw(kind, alpha, beta.unwrap_or(alpha / 10.0))?;
    Ok(decision(statistic, report, 0.0))
}

/// RMS critical value; fails with `MissingTable` without tables.
#[allow(clippy::too_many_arguments)]
pub fn rms_hook(
    sample: &MomentSample,
    kind: StatisticKind,
    rule: &SelectionRule,
    alpha: f64,
    tables: Option<&RmsTables>,
    mode: Mode,
    draws: usize,
    seed: u64,
) -> Result<CriticalValueReport> {
    check_draws(draws)?;
    let mut ctx = TestContext::new(sample, mode, draws, seed)?;
    ctx.rms(kind, rule, alpha, tables)
}

/// Convenience: studentized scaled means for a summary under a schedule.
pub fn xi_hat(summary: &MomentSummary, kappa: KappaSchedule) -> Result<DVector<f64>> {
    moment_model::studentized_scaled_mean(summary, kappa.kappa(summary.n)?)
}

/// Lower Cholesky factor as a row-major vector, or `NotPositiveDefinite`.
pub fn cholesky_factor(omega: &DMatrix<f64>) -> Result<Vec<f64>> {
    let j = omega.nrows();
    let mut a: Vec<f64> = (0..j * j).map(|k| omega[(k / j, k % j)]).collect();
    if !cholesky_in_place(&mut a, j) {
        return Err(Error::NotPositiveDefinite);
    }
    for r in 0..j {
        for c in r + 1..j {
            a[r * j + c] = 0.0;
        }
    }
    Ok(a)
}

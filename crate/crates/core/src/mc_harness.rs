//! Monte Carlo experiments: null rejection sweeps over 0/inf mean patterns,
//! size-corrected local power, and result emission.
//!
//! Replication r of every run draws its normal innovations from substream
//! (seed, SAMPLE, r) and its resampling indices from (seed, BOOTSTRAP, r),
//! so all patterns, procedures and statistics are paired on the same draws.
//! Each replication goes through [`TestContext`], the same decision path
//! used for a single data set.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critical_values::{self, Method, Mode, RmsTables, TestConfig, TestContext};
use crate::error::{Error, Result};
use crate::moment_model::{self, CorrelationFamily, FamilyKind, MomentSample};
use crate::rng::{tag, Substream};
use crate::selection::KappaSchedule;
use crate::test_statistics::StatisticKind;

pub const DEFAULT_INFINITY_SURROGATE: f64 = 10.0;
const PATTERN_TAG: u64 = 0x5041_5454;

fn default_surrogate() -> f64 {
    DEFAULT_INFINITY_SURROGATE
}

fn default_alpha() -> f64 {
    0.05
}

fn default_phi() -> u8 {
    1
}

fn default_mode() -> Mode {
    Mode::Bootstrap
}

fn default_procedures() -> Vec<Method> {
    vec![Method::Gms, Method::Cms, Method::Rsw]
}

fn default_statistics() -> Vec<StatisticKind> {
    vec![StatisticKind::Mmm, StatisticKind::Aqlr]
}

/// Full-scale replication count for a given J.
pub fn full_scale_replications(j: usize) -> usize {
    if j >= 10 {
        2500
    } else {
        10_000
    }
}

pub const DESK_REPLICATIONS: usize = 2000;
pub const DESK_BOOTSTRAP: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(rename = "J")]
    pub j: usize,
    pub family: FamilyKind,
    /// Toeplitz first-row correlations; the standard design when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    pub n: usize,
    pub r_mc: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub kappa: KappaSchedule,
    #[serde(default = "default_phi")]
    pub phi: u8,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_procedures")]
    pub procedures: Vec<Method>,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<StatisticKind>,
    /// Null mean patterns over {0, inf}; the default enumeration when absent.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_patterns")]
    pub null_patterns: Option<Vec<Vec<f64>>>,
    /// Extra randomly chosen null patterns added to the default enumeration for J > 4.
    #[serde(default)]
    pub extra_random_patterns: usize,
    /// Local alternatives mu; simulated at mean mu / sqrt(n).
    #[serde(default)]
    pub alternatives: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_surrogate")]
    pub infinity_surrogate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Keep per-replication corrected critical values of the power run.
    #[serde(default)]
    pub retain_critical_values: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_tables: Option<RmsTables>,
}

mod opt_patterns {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize)]
    struct Wrap<'a>(#[serde(with = "crate::serde_inf::vecvec")] &'a Vec<Vec<f64>>);

    #[derive(Deserialize)]
    struct Owned(#[serde(with = "crate::serde_inf::vecvec")] Vec<Vec<f64>>);

    pub fn serialize<S: Serializer>(v: &Option<Vec<Vec<f64>>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(p) => s.serialize_some(&Wrap(p)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<f64>>>, D::Error> {
        Ok(Option::<Owned>::deserialize(d)?.map(|o| o.0))
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for a design cell.
    pub fn new(j: usize, family: FamilyKind, n: usize) -> Self {
        Self {
            j,
            family,
            rho: None,
            n,
            r_mc: DESK_REPLICATIONS,
            b: DESK_BOOTSTRAP,
            alpha: 0.05,
            kappa: KappaSchedule::SqrtLogN,
            phi: 1,
            mode: Mode::Bootstrap,
            procedures: default_procedures(),
            statistics: default_statistics(),
            null_patterns: None,
            extra_random_patterns: 0,
            alternatives: Vec::new(),
            seed: 0,
            infinity_surrogate: DEFAULT_INFINITY_SURROGATE,
            beta: None,
            retain_critical_values: false,
            rms_tables: None,
        }
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn correlation_family(&self) -> Result<CorrelationFamily> {
        let family = match &self.rho {
            Some(rho) => CorrelationFamily::custom(self.family, rho.clone()),
            None => CorrelationFamily::standard(self.family, self.j)?,
        };
        if family.j() != self.j {
            return Err(Error::InvalidInput(format!(
                "rho has {} entries but J = {}",
                family.rho.len(),
                self.j
            )));
        }
        Ok(family)
    }

    pub fn test_config(&self, procedure: Method, statistic: StatisticKind) -> TestConfig {
        TestConfig {
            statistic,
            procedure,
            phi: self.phi,
            kappa: self.kappa,
            mode: self.mode,
            alpha: self.alpha,
            draws: self.b,
            beta: self.beta,
            rms_tables: self.rms_tables.clone(),
        }
    }

    /// The null patterns this configuration sweeps.
    pub fn patterns(&self) -> Result<Vec<Vec<f64>>> {
        let patterns = match &self.null_patterns {
            Some(p) => p.clone(),
            None => default_null_patterns(self.j, self.extra_random_patterns, self.seed),
        };
        for p in &patterns {
            validate_null_pattern(p, self.j)?;
        }
        Ok(patterns)
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.n < 2 {
            return Err(Error::InvalidInput("need J >= 1 and n >= 2".into()));
        }
        if self.r_mc < 1 {
            return Err(Error::InvalidInput("r_mc must be at least 1".into()));
        }
        if !(self.infinity_surrogate > 0.0 && self.infinity_surrogate.is_finite()) {
            return Err(Error::InvalidInput("infinity_surrogate must be positive and finite".into()));
        }
        moment_model::make_toeplitz(&self.correlation_family()?)?;
        self.patterns()?;
        for mu in &self.alternatives {
            if mu.len() != self.j || mu.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "alternatives must be finite vectors of length {}",
                    self.j
                )));
            }
        }
        for &p in &self.procedures {
            for &s in &self.statistics {
                self.test_config(p, s).validate()?;
            }
        }
        Ok(())
    }
}

fn validate_null_pattern(p: &[f64], j: usize) -> Result<()> {
    if p.len() != j {
        return Err(Error::InvalidInput(format!("null pattern has length {}, expected {j}", p.len())));
    }
    if p.iter().any(|x| *x != 0.0 && *x != f64::INFINITY) {
        return Err(Error::InvalidInput("null pattern entries must be 0 or inf".into()));
    }
    if !p.contains(&0.0) {
        return Err(Error::InvalidInput("null pattern needs at least one zero".into()));
    }
    Ok(())
}

fn pattern_from_mask(j: usize, zeros: u64) -> Vec<f64> {
    (0..j)
        .map(|k| if zeros >> k & 1 == 1 { 0.0 } else { f64::INFINITY })
        .collect()
}

/// Every {0, inf}^J vector with at least one zero.
pub fn all_null_patterns(j: usize) -> Vec<Vec<f64>> {
    (1..(1u64 << j)).map(|mask| pattern_from_mask(j, mask)).collect()
}

/// All-zero, single-zero and adjacent-pair patterns.
pub fn extreme_null_patterns(j: usize) -> Vec<Vec<f64>> {
    let mut masks = vec![(1u64 << j) - 1];
    masks.extend((0..j).map(|k| 1u64 << k));
    masks.extend((0..j.saturating_sub(1)).map(|k| 0b11u64 << k));
    masks.dedup();
    let mut seen = std::collections::BTreeSet::new();
    masks
        .into_iter()
        .filter(|m| seen.insert(*m))
        .map(|m| pattern_from_mask(j, m))
        .collect()
}

/// Full enumeration for J <= 4; extremes plus `extra` random patterns beyond.
pub fn default_null_patterns(j: usize, extra: usize, seed: u64) -> Vec<Vec<f64>> {
    if j <= 4 {
        return all_null_patterns(j);
    }
    let mut patterns = extreme_null_patterns(j);
    if extra > 0 {
        let rest: Vec<Vec<f64>> = all_null_patterns(j)
            .into_iter()
            .filter(|p| !patterns.contains(p))
            .collect();
        let mut rng = Substream::root(seed).child(PATTERN_TAG).rng();
        let picks = sample_indices(&mut rng, rest.len(), extra.min(rest.len()));
        let mut picks: Vec<usize> = picks.into_iter().collect();
        picks.sort_unstable();
        patterns.extend(picks.into_iter().map(|k| rest[k].clone()));
    }
    patterns
}

/// Identifier such as "null:0i0" (0 = binding, i = infinite).
pub fn null_pattern_id(p: &[f64]) -> String {
    let body: String = p.iter().map(|x| if *x == 0.0 { '0' } else { 'i' }).collect();
    format!("null:{body}")
}

pub fn alternative_id(k: usize) -> String {
    format!("alt:{k}")
}

/// Draws rows mean + L z_i; `+inf` mean entries become `surrogate`.
pub struct SampleGenerator {
    j: usize,
    n: usize,
    mean: Vec<f64>,
    chol: DMatrix<f64>,
}

impl SampleGenerator {
    pub fn new(family: &CorrelationFamily, mu: &[f64], n: usize, surrogate: f64) -> Result<Self> {
        let omega = moment_model::make_toeplitz(family)?;
        if mu.len() != family.j() {
            return Err(Error::InvalidInput(format!(
                "mean has length {} but J = {}",
                mu.len(),
                family.j()
            )));
        }
        let chol = omega.cholesky().ok_or(Error::NotPositiveDefinite)?.l();
        let mean = mu
            .iter()
            .map(|&m| if m == f64::INFINITY { surrogate } else { m })
            .collect();
        Ok(Self {
            j: family.j(),
            n,
            mean,
            chol,
        })
    }

    pub fn draw(&self, stream: Substream) -> Result<MomentSample> {
        let (n, j) = (self.n, self.j);
        let mut rng = stream.rng();
        let mut values = DMatrix::zeros(n, j);
        let mut z = vec![0.0; j];
        for i in 0..n {
            for zk in z.iter_mut() {
                *zk = rng.sample(StandardNormal);
            }
            for a in 0..j {
                let mut x = self.mean[a];
                for b in 0..=a {
                    x += self.chol[(a, b)] * z[b];
                }
                values[(i, a)] = x;
            }
        }
        MomentSample::new(values)
    }
}

pub fn simulate_sample(
    family: &CorrelationFamily,
    mu: &[f64],
    n: usize,
    stream: Substream,
    surrogate: f64,
) -> Result<MomentSample> {
    SampleGenerator::new(family, mu, n, surrogate)?.draw(stream)
}

/// Substream of the sample drawn in replication r.
pub fn sample_stream(seed: u64, replication: usize) -> Substream {
    Substream::root(seed).child(tag::SAMPLE).child(replication as u64)
}

/// Seed of the draw set used in replication r; passing it as the seed of a
/// single test on the same data reproduces the replication's decision.
pub fn bootstrap_seed(seed: u64, replication: usize) -> u64 {
    Substream::root(seed).child(tag::BOOTSTRAP).child(replication as u64).seed()
}

/// One procedure/statistic pair inside a replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub procedure: Method,
    pub statistic: StatisticKind,
    pub t: f64,
    /// Uncorrected critical value.
    pub c: f64,
    /// Uncorrected decision.
    pub reject: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_stage: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_omission: Option<bool>,
    #[serde(default)]
    pub tilt_fallback: bool,
}

/// Runs every configured procedure and statistic on one simulated sample.
pub fn replicate(config: &ExperimentConfig, generator: &SampleGenerator, r: usize) -> Result<Vec<Outcome>> {
    let wrap = |e: Error| Error::Replication {
        index: r,
        source: Box::new(e),
    };
    let sample = generator.draw(sample_stream(config.seed, r)).map_err(wrap)?;
    let mut ctx = TestContext::new(&sample, config.mode, config.b, bootstrap_seed(config.seed, r)).map_err(wrap)?;
    let mut out = Vec::with_capacity(config.statistics.len() * config.procedures.len());
    for &statistic in &config.statistics {
        let t = ctx.statistic(statistic).map_err(wrap)?;
        for &procedure in &config.procedures {
            let report = ctx
                .critical_value(&config.test_config(procedure, statistic))
                .map_err(wrap)?;
            let supplement = report.supplementary.clone();
            let tilt_fallback = report.tilt_fallback;
            let d = critical_values::decision(t, report, 0.0);
            out.push(Outcome {
                procedure,
                statistic,
                t,
                c: d.critical_value.value,
                reject: d.reject,
                first_stage: supplement.as_ref().map(|s| s.first_stage),
                no_omission: supplement.as_ref().map(|s| s.no_omission),
                tilt_fallback,
            });
        }
    }
    Ok(out)
}

/// All replications for one mean vector, in replication order.
pub fn run_pattern(config: &ExperimentConfig, mu: &[f64]) -> Result<Vec<Vec<Outcome>>> {
    let family = config.correlation_family()?;
    let generator = SampleGenerator::new(&family, mu, config.n, config.infinity_surrogate)?;
    (0..config.r_mc)
        .into_par_iter()
        .map(|r| replicate(config, &generator, r))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub procedure: Method,
    pub statistic: StatisticKind,
    pub mu_id: String,
    pub rate: f64,
    pub se: f64,
    /// Correction added to the critical value (power cells only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnrpEntry {
    pub procedure: Method,
    pub statistic: StatisticKind,
    pub mnrp: f64,
    pub se: f64,
    /// Pattern attaining the maximum (first in enumeration order on ties).
    pub mu_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub procedure: Method,
    pub statistic: StatisticKind,
    pub delta: f64,
    /// RSW maximum null rejection rate the procedure is matched to.
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalValueSample {
    pub procedure: Method,
    pub statistic: StatisticKind,
    pub mu_id: String,
    /// Corrected critical value of each replication, in replication order.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RswDiagnostic {
    pub statistic: StatisticKind,
    pub mu_id: String,
    pub first_stage_rate: f64,
    pub no_omission_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Replications in which the tilt was infeasible and CMS used the GMS selection.
    pub tilt_infeasible: usize,
    pub rsw: Vec<RswDiagnostic>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub mnrp: Vec<MnrpEntry>,
    pub corrections: Vec<Correction>,
    #[serde(default)]
    pub critical_value_samples: Vec<CriticalValueSample>,
    pub diagnostics: Diagnostics,
    /// Raw per-replication outcomes keyed by mu_id; not serialized. Null runs
    /// keep only the patterns attaining an MNRP.
    #[serde(skip)]
    pub outcomes: BTreeMap<String, Vec<Vec<Outcome>>>,
}

pub fn standard_error(rate: f64, reps: usize) -> f64 {
    (rate * (1.0 - rate) / reps as f64).sqrt()
}

fn outcomes_for<'a>(
    reps: &'a [Vec<Outcome>],
    procedure: Method,
    statistic: StatisticKind,
) -> impl Iterator<Item = &'a Outcome> + 'a {
    reps.iter().filter_map(move |rep| {
        rep.iter()
            .find(|o| o.procedure == procedure && o.statistic == statistic)
    })
}

fn rsw_diagnostics(mu_id: &str, reps: &[Vec<Outcome>], statistics: &[StatisticKind]) -> Vec<RswDiagnostic> {
    let mut out = Vec::new();
    for &statistic in statistics {
        let rows: Vec<&Outcome> = outcomes_for(reps, Method::Rsw, statistic).collect();
        if rows.is_empty() {
            continue;
        }
        let count = rows.len() as f64;
        out.push(RswDiagnostic {
            statistic,
            mu_id: mu_id.to_string(),
            first_stage_rate: rows.iter().filter(|o| o.first_stage == Some(true)).count() as f64 / count,
            no_omission_rate: rows.iter().filter(|o| o.no_omission == Some(true)).count() as f64 / count,
        });
    }
    out
}

fn tilt_fallbacks(reps: &[Vec<Outcome>]) -> usize {
    reps.iter()
        .filter(|rep| rep.iter().any(|o| o.tilt_fallback))
        .count()
}

/// Null rejection rates over every pattern, their maxima, and the size
/// corrections that match each procedure to the RSW maximum.
pub fn run_mnrp(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let patterns = config.patterns()?;
    let combos: Vec<(Method, StatisticKind)> = config
        .procedures
        .iter()
        .flat_map(|&p| config.statistics.iter().map(move |&s| (p, s)))
        .collect();
    // rates[k][i]: rejection rate of combo k at pattern i
    let mut rates = vec![Vec::with_capacity(patterns.len()); combos.len()];
    let mut best: Vec<Option<(f64, String)>> = vec![None; combos.len()];
    let mut order = Vec::with_capacity(patterns.len());
    let mut outcomes = BTreeMap::new();
    let mut diagnostics = Diagnostics::default();
    for p in &patterns {
        let id = null_pattern_id(p);
        log::info!("null pattern {id}: {} replications", config.r_mc);
        let reps = run_pattern(config, p)?;
        diagnostics.tilt_infeasible += tilt_fallbacks(&reps);
        diagnostics.rsw.extend(rsw_diagnostics(&id, &reps, &config.statistics));
        for (k, &(procedure, statistic)) in combos.iter().enumerate() {
            let rate = outcomes_for(&reps, procedure, statistic).filter(|o| o.reject).count() as f64
                / config.r_mc as f64;
            rates[k].push(rate);
            if best[k].as_ref().is_none_or(|(b, _)| rate > *b) {
                best[k] = Some((rate, id.clone()));
            }
        }
        outcomes.insert(id.clone(), reps);
        // only maximizing patterns are needed later; large J has thousands
        outcomes.retain(|key, _| best.iter().flatten().any(|(_, b)| b == key));
        order.push(id);
    }

    let mut cells = Vec::new();
    let mut mnrp = Vec::new();
    for (k, &(procedure, statistic)) in combos.iter().enumerate() {
        for (id, &rate) in order.iter().zip(&rates[k]) {
            cells.push(Cell {
                procedure,
                statistic,
                mu_id: id.clone(),
                rate,
                se: standard_error(rate, config.r_mc),
                delta: None,
            });
        }
        if let Some((rate, id)) = best[k].take() {
            mnrp.push(MnrpEntry {
                procedure,
                statistic,
                mnrp: rate,
                se: standard_error(rate, config.r_mc),
                mu_id: id,
            });
        }
    }

    let mut result = ExperimentResult {
        config: config.clone(),
        cells,
        mnrp,
        corrections: Vec::new(),
        critical_value_samples: Vec::new(),
        diagnostics,
        outcomes,
    };
    if config.procedures.contains(&Method::Rsw) {
        for &procedure in &config.procedures {
            if procedure == Method::Rsw {
                continue;
            }
            for &statistic in &config.statistics {
                let baseline = result.mnrp_of(Method::Rsw, statistic).expect("RSW was run");
                let delta = mnrp_correction(&result, procedure, statistic)?;
                result.corrections.push(Correction {
                    procedure,
                    statistic,
                    delta,
                    baseline,
                });
            }
        }
    }
    Ok(result)
}

impl ExperimentResult {
    pub fn mnrp_of(&self, procedure: Method, statistic: StatisticKind) -> Option<f64> {
        self.mnrp
            .iter()
            .find(|m| m.procedure == procedure && m.statistic == statistic)
            .map(|m| m.mnrp)
    }

    pub fn correction_of(&self, procedure: Method, statistic: StatisticKind) -> Option<f64> {
        self.corrections
            .iter()
            .find(|c| c.procedure == procedure && c.statistic == statistic)
            .map(|c| c.delta)
    }

    pub fn rate_of(&self, procedure: Method, statistic: StatisticKind, mu_id: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.procedure == procedure && c.statistic == statistic && c.mu_id == mu_id)
            .map(|c| c.rate)
    }

    pub fn cv_sample(&self, procedure: Method, statistic: StatisticKind, mu_id: &str) -> Option<&[f64]> {
        self.critical_value_samples
            .iter()
            .find(|s| s.procedure == procedure && s.statistic == statistic && s.mu_id == mu_id)
            .map(|s| s.values.as_slice())
    }
}

/// The (1 - p_RSW) empirical quantile of T - c over the replications of the
/// pattern where `procedure` rejects most often.
pub fn mnrp_correction(null_run: &ExperimentResult, procedure: Method, statistic: StatisticKind) -> Result<f64> {
    let baseline = null_run
        .mnrp_of(Method::Rsw, statistic)
        .ok_or_else(|| Error::MissingBaseline(statistic.label().to_string()))?;
    let entry = null_run
        .mnrp
        .iter()
        .find(|m| m.procedure == procedure && m.statistic == statistic)
        .ok_or_else(|| Error::InvalidInput(format!("{procedure}-{statistic} was not part of the null run")))?;
    let reps = null_run
        .outcomes
        .get(&entry.mu_id)
        .ok_or_else(|| Error::InvalidInput("null run holds no raw outcomes".into()))?;
    let mut excess: Vec<f64> = outcomes_for(reps, procedure, statistic).map(|o| o.t - o.c).collect();
    if baseline >= 1.0 {
        return Ok(excess.iter().copied().fold(f64::INFINITY, f64::min) - 1.0);
    }
    critical_values::empirical_quantile(&mut excess, 1.0 - baseline)
}

/// Size-corrected rejection rates at each alternative mu / sqrt(n). RSW is
/// the baseline and is never corrected; other procedures add their delta.
pub fn run_power(config: &ExperimentConfig, corrections: &[Correction]) -> Result<ExperimentResult> {
    config.validate()?;
    let root_n = (config.n as f64).sqrt();
    let mut cells = Vec::new();
    let mut samples = Vec::new();
    let mut outcomes = BTreeMap::new();
    let mut diagnostics = Diagnostics::default();
    for (k, mu) in config.alternatives.iter().enumerate() {
        let id = alternative_id(k);
        let scaled: Vec<f64> = mu.iter().map(|m| m / root_n).collect();
        let reps = run_pattern(config, &scaled)?;
        diagnostics.tilt_infeasible += tilt_fallbacks(&reps);
        diagnostics.rsw.extend(rsw_diagnostics(&id, &reps, &config.statistics));
        for &procedure in &config.procedures {
            for &statistic in &config.statistics {
                let delta = if procedure == Method::Rsw {
                    0.0
                } else {
                    corrections
                        .iter()
                        .find(|c| c.procedure == procedure && c.statistic == statistic)
                        .map(|c| c.delta)
                        .ok_or_else(|| {
                            Error::MissingBaseline(format!("{statistic} (no correction for {procedure})"))
                        })?
                };
                let rows: Vec<&Outcome> = outcomes_for(&reps, procedure, statistic).collect();
                let rejections = rows
                    .iter()
                    .filter(|o| o.t > o.c + delta && o.first_stage.unwrap_or(true))
                    .count();
                let rate = rejections as f64 / config.r_mc as f64;
                cells.push(Cell {
                    procedure,
                    statistic,
                    mu_id: id.clone(),
                    rate,
                    se: standard_error(rate, config.r_mc),
                    delta: Some(delta),
                });
                if config.retain_critical_values {
                    samples.push(CriticalValueSample {
                        procedure,
                        statistic,
                        mu_id: id.clone(),
                        values: rows.iter().map(|o| o.c + delta).collect(),
                    });
                }
            }
        }
        outcomes.insert(id, reps);
    }
    Ok(ExperimentResult {
        config: config.clone(),
        cells,
        mnrp: Vec::new(),
        corrections: corrections.to_vec(),
        critical_value_samples: samples,
        diagnostics,
        outcomes,
    })
}

/// Null sweep, then power at the alternatives (if any) with the null run's corrections.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut null_run = run_mnrp(config)?;
    if config.alternatives.is_empty() {
        return Ok(null_run);
    }
    let power = run_power(config, &null_run.corrections)?;
    null_run.cells.extend(power.cells);
    null_run.critical_value_samples = power.critical_value_samples;
    null_run.diagnostics.tilt_infeasible += power.diagnostics.tilt_infeasible;
    null_run.diagnostics.rsw.extend(power.diagnostics.rsw);
    null_run.outcomes.extend(power.outcomes);
    Ok(null_run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidInput(format!("unknown output format {other:?}"))),
        }
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "procedure", "statistic", "J", "family", "n", "mu_id", "rate", "se", "delta", "lo", "hi",
];

/// One CSV row per cell plus one per MNRP entry (mu_id "mnrp").
pub fn write_csv<W: Write>(results: &[ExperimentResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for result in results {
        let cfg = &result.config;
        let mut row = |procedure: Method, statistic: StatisticKind, mu_id: &str, rate: f64, se: f64, delta: Option<f64>| {
            w.write_record([
                procedure.label().to_string(),
                statistic.label().to_string(),
                cfg.j.to_string(),
                cfg.family.label().to_string(),
                cfg.n.to_string(),
                mu_id.to_string(),
                format!("{rate}"),
                format!("{se}"),
                delta.map(|d| format!("{d}")).unwrap_or_default(),
                format!("{}", (rate - 2.0 * se).max(0.0)),
                format!("{}", (rate + 2.0 * se).min(1.0)),
            ])
        };
        for c in &result.cells {
            row(c.procedure, c.statistic, &c.mu_id, c.rate, c.se, c.delta)?;
        }
        for m in &result.mnrp {
            row(m.procedure, m.statistic, "mnrp", m.mnrp, m.se, result.correction_of(m.procedure, m.statistic))?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_json<W: Write>(results: &[ExperimentResult], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, results)?;
    Ok(())
}

/// Writes `results` to `path` in the requested format.
pub fn emit(results: &[ExperimentResult], format: OutputFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = std::io::BufWriter::new(file);
    match format {
        OutputFormat::Csv => write_csv(results, writer),
        OutputFormat::Json => write_json(results, writer),
    }
    .map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// MNRPs laid out as n x (procedure, statistic) rows against J x family columns.
pub fn table1_pivot<W: Write>(results: &[ExperimentResult], out: W) -> Result<()> {
    let mut columns: Vec<(usize, FamilyKind)> = results.iter().map(|r| (r.config.j, r.config.family)).collect();
    columns.sort_by_key(|(j, f)| (*j, *f as u8));
    columns.dedup();
    let mut rows: Vec<(usize, Method, StatisticKind)> = results
        .iter()
        .flat_map(|r| r.mnrp.iter().map(move |m| (r.config.n, m.procedure, m.statistic)))
        .collect();
    rows.sort();
    rows.dedup();

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["n".to_string(), "procedure".to_string(), "statistic".to_string()];
    header.extend(columns.iter().map(|(j, f)| format!("J{j}_{}", f.label())));
    w.write_record(&header)?;
    for (n, procedure, statistic) in rows {
        let mut record = vec![n.to_string(), procedure.label().to_string(), statistic.label().to_string()];
        for (j, family) in &columns {
            let value = results
                .iter()
                .filter(|r| r.config.n == n && r.config.j == *j && r.config.family == *family)
                .find_map(|r| r.mnrp_of(procedure, statistic));
            record.push(value.map(|v| format!("{v:.3}")).unwrap_or_default());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// The alternative used for the size-corrected power illustration.
pub const TABLE3_ALTERNATIVE: [f64; 4] = [-2.4705, 1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Table1,
    Table3,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Ok(Self::Table1),
            "table3" => Ok(Self::Table3),
            other => Err(Error::InvalidInput(format!("unknown preset {other:?}"))),
        }
    }
}

/// Configurations of a preset at published or desk scale.
pub fn preset(which: Preset, desk_scale: bool, seed: u64) -> Vec<ExperimentConfig> {
    let scale = |mut c: ExperimentConfig| {
        if desk_scale {
            c.r_mc = DESK_REPLICATIONS;
            c.b = DESK_BOOTSTRAP;
        } else {
            c.r_mc = full_scale_replications(c.j);
            c.b = critical_values::DEFAULT_BOOTSTRAP_DRAWS;
        }
        c.seed = seed;
        c
    };
    match which {
        Preset::Table1 => {
            let mut out = Vec::new();
            for n in [50, 100, 250] {
                for j in [2, 4, 10] {
                    for family in [FamilyKind::Neg, FamilyKind::Zero, FamilyKind::Pos] {
                        out.push(scale(ExperimentConfig::new(j, family, n)));
                    }
                }
            }
            out
        }
        Preset::Table3 => [50, 100, 250]
            .into_iter()
            .map(|n| {
                let mut c = ExperimentConfig::new(4, FamilyKind::Pos, n);
                c.alternatives = vec![TABLE3_ALTERNATIVE.to_vec()];
                c.retain_critical_values = true;
                scale(c)
            })
            .collect(),
    }
}

//! Moment selection functions and the kappa_n threshold schedules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::test_statistics::StatisticKind;

/// Largest J for which the exhaustive {0,1}^J search of the fifth rule runs.
pub const PHI5_MAX_J: usize = 20;

/// Per-moment shifts in R_+ ∪ {+inf}; `+inf` omits the moment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionVector {
    #[serde(with = "crate::serde_inf::vec")]
    pub shifts: Vec<f64>,
    /// True when entries may be negative (the identity rule).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub signed: bool,
}

impl SelectionVector {
    pub fn new(shifts: Vec<f64>) -> Self {
        Self {
            shifts,
            signed: false,
        }
    }

    pub fn zeros(j: usize) -> Self {
        Self::new(vec![0.0; j])
    }

    pub fn omit_all(j: usize) -> Self {
        Self::new(vec![f64::INFINITY; j])
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn omitted_count(&self) -> usize {
        self.shifts.iter().filter(|s| **s == f64::INFINITY).count()
    }

    /// Componentwise `self >= other`.
    pub fn dominates(&self, other: &SelectionVector) -> bool {
        self.shifts.len() == other.shifts.len()
            && self.shifts.iter().zip(&other.shifts).all(|(a, b)| a >= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum KappaSchedule {
    /// (ln n)^{1/2}
    SqrtLogN,
    /// (2 ln ln n)^{1/2}
    SqrtTwoLogLogN,
    Fixed(f64),
}

impl Default for KappaSchedule {
    fn default() -> Self {
        KappaSchedule::SqrtLogN
    }
}

impl KappaSchedule {
    pub fn kappa(self, n: usize) -> Result<f64> {
        let nf = n as f64;
        let value = match self {
            KappaSchedule::SqrtLogN => {
                if n < 2 {
                    return Err(Error::Domain(format!("sqrt(ln n) needs n >= 2, got {n}")));
                }
                nf.ln().sqrt()
            }
            KappaSchedule::SqrtTwoLogLogN => {
                if n < 3 {
                    return Err(Error::Domain(format!("sqrt(2 ln ln n) needs n >= 3, got {n}")));
                }
                (2.0 * nf.ln().ln()).sqrt()
            }
            KappaSchedule::Fixed(v) => v,
        };
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::Domain(format!("kappa must be positive, got {value}")));
        }
        Ok(value)
    }
}

impl std::str::FromStr for KappaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt-log-n" => Ok(Self::SqrtLogN),
            "sqrt-2loglogn" | "sqrt-2-log-log-n" => Ok(Self::SqrtTwoLogLogN),
            other => match other.strip_prefix("fixed:") {
                Some(v) => v
                    .parse::<f64>()
                    .map(Self::Fixed)
                    .map_err(|_| Error::InvalidInput(format!("bad fixed kappa {v:?}"))),
                None => Err(Error::InvalidInput(format!("unknown kappa schedule {other:?}"))),
            },
        }
    }
}

/// Hard threshold at 1: 0 if xi_j <= 1, +inf otherwise.
pub fn phi1(xi: &[f64]) -> SelectionVector {
    SelectionVector::new(
        xi.iter()
            .map(|&x| if x <= 1.0 { 0.0 } else { f64::INFINITY })
            .collect(),
    )
}

/// Nondecreasing psi: 0 up to `lower`, linear up to `ceiling` on (lower, upper), +inf from `upper` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    pub lower: f64,
    pub upper: f64,
    pub ceiling: f64,
}

impl Default for Psi {
    fn default() -> Self {
        Self {
            lower: 1.0,
            upper: 2.0,
            ceiling: 2.0,
        }
    }
}

impl Psi {
    pub fn apply(&self, x: f64) -> f64 {
        if x <= self.lower {
            0.0
        } else if x >= self.upper {
            f64::INFINITY
        } else {
            self.ceiling * (x - self.lower) / (self.upper - self.lower)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) || !(self.ceiling >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid psi parameters {self:?}")));
        }
        Ok(())
    }
}

pub fn phi2(xi: &[f64], psi: &Psi) -> Result<SelectionVector> {
    psi.validate()?;
    Ok(SelectionVector::new(xi.iter().map(|&x| psi.apply(x)).collect()))
}

pub fn phi3(xi: &[f64]) -> SelectionVector {
    SelectionVector::new(xi.iter().map(|&x| x.max(0.0)).collect())
}

/// Identity rule; entries may be negative.
pub fn phi4(xi: &[f64]) -> SelectionVector {
    SelectionVector {
        shifts: xi.to_vec(),
        signed: true,
    }
}

/// Penalty zeta(|c|) of the fifth rule, a * |c|.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPenalty {
    pub slope: f64,
}

impl Default for LinearPenalty {
    fn default() -> Self {
        Self { slope: 1.0 }
    }
}

/// Modified MSC rule: minimise S(-c∘xi, Omega) - zeta(|c|) over c in {0,1}^J,
/// keeping moments with c_j = 1. Ties go to the pattern with more kept moments.
pub fn phi5(
    xi: &[f64],
    omega: &DMatrix<f64>,
    kind: StatisticKind,
    zeta: impl Fn(usize) -> f64,
) -> Result<SelectionVector> {
    let j = xi.len();
    if j > PHI5_MAX_J {
        return Err(Error::DimensionCap { j, cap: PHI5_MAX_J });
    }
    let adjusted = match kind {
        StatisticKind::Aqlr => crate::test_statistics::adjust_matrix(omega)?,
        StatisticKind::Mmm => omega.clone(),
    };
    let mut best: Option<(f64, u32, u64)> = None;
    let mut arg = vec![0.0; j];
    for mask in 0u64..(1u64 << j) {
        for k in 0..j {
            arg[k] = if mask >> k & 1 == 1 {
                -xi[k]
            } else {
                0.0
            };
        }
        // Keeping a moment with xi_j = +inf makes S infinite.
        if arg.iter().any(|a| *a == f64::NEG_INFINITY) {
            continue;
        }
        let s = match kind {
            StatisticKind::Mmm => crate::test_statistics::mmm(&arg, &adjusted, 1.0)?,
            StatisticKind::Aqlr => crate::test_statistics::aqlr(&arg, &adjusted, 1.0)?.value,
        };
        let size = mask.count_ones();
        let crit = s - zeta(size as usize);
        let better = match best {
            None => true,
            Some((b, bsize, _)) => crit < b || (crit == b && size > bsize),
        };
        if better {
            best = Some((crit, size, mask));
        }
    }
    let mask = best.map_or(0, |b| b.2);
    Ok(SelectionVector::new(
        (0..j)
            .map(|k| if mask >> k & 1 == 1 { 0.0 } else { f64::INFINITY })
            .collect(),
    ))
}

/// A configured moment selection function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum SelectionRule {
    Phi1,
    Phi2 {
        #[serde(default)]
        psi: Psi,
    },
    Phi3,
    Phi4,
    Phi5 {
        statistic: StatisticKind,
        #[serde(default)]
        zeta: LinearPenalty,
    },
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::Phi1
    }
}

impl SelectionRule {
    /// Builds the rule named by index 1..=5 with default parameters.
    pub fn from_index(k: u8, statistic: StatisticKind) -> Result<Self> {
        Ok(match k {
            1 => Self::Phi1,
            2 => Self::Phi2 { psi: Psi::default() },
            3 => Self::Phi3,
            4 => Self::Phi4,
            5 => Self::Phi5 {
                statistic,
                zeta: LinearPenalty::default(),
            },
            other => return Err(Error::InvalidInput(format!("selection rule must be 1..=5, got {other}"))),
        })
    }

    pub fn apply(&self, xi: &DVector<f64>, omega: &DMatrix<f64>) -> Result<SelectionVector> {
        let xi = xi.as_slice();
        match self {
            Self::Phi1 => Ok(phi1(xi)),
            Self::Phi2 { psi } => phi2(xi, psi),
            Self::Phi3 => Ok(phi3(xi)),
            Self::Phi4 => Ok(phi4(xi)),
            Self::Phi5 { statistic, zeta } => {
                let slope = zeta.slope;
                phi5(xi, omega, *statistic, |m| slope * m as f64)
            }
        }
    }
}

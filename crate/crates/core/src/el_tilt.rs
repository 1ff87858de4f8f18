//! Empirical-likelihood tilting under the moment inequality constraints.
//!
//! Solves max sum_i ln p_i subject to sum_i p_i g_ij >= 0 for every j and
//! p on the simplex. The solver works on the concave dual
//!
//!   D(lambda) = sum_i ln(1 + lambda' g_i),   lambda <= 0,
//!
//! whose maximizer gives p_i = 1 / (n (1 + lambda' g_i)). KKT for the dual
//! is exactly primal feasibility plus complementary slackness: the gradient
//! of D is n * sum_i p_i g_i, which must be >= 0 where lambda_j = 0 and zero
//! where lambda_j < 0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment_model::{self, MomentSample, MomentSummary};
use crate::test_statistics::{cholesky_in_place, cholesky_solve};

const KKT_TOL: f64 = 1e-10;
/// Tighter target the Newton loop aims for before accepting at `KKT_TOL`.
const KKT_TARGET: f64 = 1e-14;
const MAX_ITER: usize = 200;
const ARMIJO_C: f64 = 1e-4;
const BINDING_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiltStatus {
    Solved,
    Infeasible,
}

/// Solution of the tilting problem.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltResult {
    pub probabilities: Vec<f64>,
    /// Dual multipliers, all <= 0.
    pub multipliers: Vec<f64>,
    pub tilted_mean: DVector<f64>,
    /// sum_i p_i (g_i - tilted_mean)(g_i - tilted_mean)'
    pub tilted_cov: DMatrix<f64>,
    pub binding_set: Vec<usize>,
    /// sum_i ln p_i
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TiltOutcome {
    Solved(TiltResult),
    Infeasible,
}

/// Per-solve record for debugging the Monte Carlo harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltDiagnostics {
    pub status: TiltStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub binding_set: Vec<usize>,
}

impl TiltOutcome {
    pub fn status(&self) -> TiltStatus {
        match self {
            TiltOutcome::Solved(_) => TiltStatus::Solved,
            TiltOutcome::Infeasible => TiltStatus::Infeasible,
        }
    }

    pub fn solved(&self) -> Option<&TiltResult> {
        match self {
            TiltOutcome::Solved(r) => Some(r),
            TiltOutcome::Infeasible => None,
        }
    }

    pub fn diagnostics(&self) -> TiltDiagnostics {
        match self {
            TiltOutcome::Solved(r) => TiltDiagnostics {
                status: TiltStatus::Solved,
                iterations: r.iterations,
                kkt_residual: r.kkt_residual,
                binding_set: r.binding_set.clone(),
            },
            TiltOutcome::Infeasible => TiltDiagnostics {
                status: TiltStatus::Infeasible,
                iterations: 0,
                kkt_residual: f64::NAN,
                binding_set: Vec::new(),
            },
        }
    }
}

impl TiltResult {
    /// Dual objective -n ln n - D(lambda) evaluated at the returned multipliers.
    pub fn dual_objective(&self, sample: &MomentSample) -> f64 {
        let n = sample.n() as f64;
        let d: f64 = (0..sample.n())
            .map(|i| {
                let r: f64 = 1.0
                    + (0..sample.j())
                        .map(|j| self.multipliers[j] * sample.get(i, j))
                        .sum::<f64>();
                r.ln()
            })
            .sum();
        -n * n.ln() - d
    }

    /// kappa^{-1} sqrt(n) D_hat^{-1/2} times the tilted mean, scaled by the
    /// unconstrained variances.
    pub fn xi(&self, summary: &MomentSummary, kappa: f64) -> Result<DVector<f64>> {
        moment_model::scaled_mean_with(summary.n, &self.tilted_mean, &summary.variances, kappa)
    }

    /// Fully-constrained variant: scaling and correlation both from the tilted covariance.
    pub fn xi_fully_constrained(&self, kappa: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.probabilities.len();
        let tilted = MomentSummary::from_moments(n, self.tilted_mean.clone(), self.tilted_cov.clone())?;
        let xi = moment_model::scaled_mean_with(n, &tilted.mean, &tilted.variances, kappa)?;
        Ok((xi, tilted.correlation))
    }
}

/// Selection statistic from the tilted mean; `None` when the tilt is infeasible.
pub fn tilted_selection(
    sample: &MomentSample,
    summary: &MomentSummary,
    kappa: f64,
    fully_constrained: bool,
) -> Result<Option<DVector<f64>>> {
    match tilt_with_summary(sample, summary)? {
        TiltOutcome::Infeasible => Ok(None),
        TiltOutcome::Solved(r) => {
            if fully_constrained {
                Ok(Some(r.xi_fully_constrained(kappa)?.0))
            } else {
                Ok(Some(r.xi(summary, kappa)?))
            }
        }
    }
}

/// Optimal value of: max s subject to p_i >= s, sum_i p_i g_ij >= 0, p on the simplex.
/// `None` when even s = -inf admits no point, i.e. the constraint set is empty.
fn phase_one(sample: &MomentSample) -> Option<f64> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let (n, j) = (sample.n(), sample.j());
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let s = lp.add_var(1.0, (f64::NEG_INFINITY, 1.0));
    let p: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    for &pi in &p {
        lp.add_constraint(&[(pi, 1.0), (s, -1.0)], ComparisonOp::Ge, 0.0);
    }
    for c in 0..j {
        let scale = sample.column(c).iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        let row: Vec<_> = p.iter().enumerate().map(|(i, &pi)| (pi, sample.get(i, c) / scale)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Ge, 0.0);
    }
    let ones: Vec<_> = p.iter().map(|&pi| (pi, 1.0)).collect();
    lp.add_constraint(ones.as_slice(), ComparisonOp::Eq, 1.0);
    match lp.solve() {
        Ok(outcome) => outcome.solution().map(|sol| sol.var_value(s)),
        Err(_) => None,
    }
}

/// Whether some probability vector on the simplex satisfies every constraint.
pub fn feasible(sample: &MomentSample) -> bool {
    for c in 0..sample.j() {
        if sample.column(c).iter().all(|&x| x < 0.0) {
            return false;
        }
    }
    phase_one(sample).is_some()
}

/// Whether a strictly positive probability vector satisfies every constraint,
/// which is what a finite empirical likelihood needs.
pub fn strictly_feasible(sample: &MomentSample) -> bool {
    for c in 0..sample.j() {
        if sample.column(c).iter().all(|&x| x <= 0.0) {
            let mean: f64 = sample.column(c).iter().sum();
            if mean < 0.0 {
                return false;
            }
        }
    }
    phase_one(sample).is_some_and(|s| s > 1e-12 / sample.n() as f64)
}

pub fn tilt(sample: &MomentSample) -> Result<TiltOutcome> {
    let summary = moment_model::summarize(sample)?;
    tilt_with_summary(sample, &summary)
}

pub fn tilt_with_summary(sample: &MomentSample, summary: &MomentSummary) -> Result<TiltOutcome> {
    let (n, j) = (sample.n(), sample.j());
    let sd: Vec<f64> = (0..j).map(|c| summary.sd(c)).collect();
    let binding = |mean: &DVector<f64>| -> Vec<usize> {
        (0..j)
            .filter(|&c| mean[c].abs() <= BINDING_TOL * (1.0 + sd[c]))
            .collect()
    };

    if summary.mean.iter().all(|&m| m >= 0.0) {
        let nf = n as f64;
        return Ok(TiltOutcome::Solved(TiltResult {
            probabilities: vec![1.0 / nf; n],
            multipliers: vec![0.0; j],
            tilted_mean: summary.mean.clone(),
            tilted_cov: summary.covariance.clone(),
            binding_set: binding(&summary.mean),
            objective: -nf * nf.ln(),
            iterations: 0,
            kkt_residual: 0.0,
        }));
    }
    for c in 0..j {
        if sample.column(c).iter().all(|&x| x < 0.0) {
            return Ok(TiltOutcome::Infeasible);
        }
    }

    let solved = newton_dual(sample, &sd).and_then(|dual| {
        let mut probabilities: Vec<f64> = dual.ratios.iter().map(|r| 1.0 / (n as f64 * r)).collect();
        let total: f64 = probabilities.iter().sum();
        // at a dual optimum the implied probabilities already sum to one;
        // anything else means D was unbounded along the path
        if (total - 1.0).abs() > 1e-8 {
            return Err(DualStop {
                iterations: dual.iterations,
                residual: f64::INFINITY,
            });
        }
        probabilities.iter_mut().for_each(|p| *p /= total);
        Ok((dual, probabilities))
    });
    match solved {
        Ok((dual, probabilities)) => {
            let (tilted_mean, tilted_cov) = moment_model::weighted_moments(sample, &probabilities);
            let objective = probabilities.iter().map(|p| p.ln()).sum();
            Ok(TiltOutcome::Solved(TiltResult {
                binding_set: binding(&tilted_mean),
                probabilities,
                multipliers: dual.lambda,
                tilted_mean,
                tilted_cov,
                objective,
                iterations: dual.iterations,
                kkt_residual: dual.residual,
            }))
        }
        Err(stop) => {
            if strictly_feasible(sample) {
                Err(Error::TiltNoConvergence {
                    iterations: stop.iterations,
                    residual: stop.residual,
                })
            } else {
                Ok(TiltOutcome::Infeasible)
            }
        }
    }
}

struct DualSolution {
    lambda: Vec<f64>,
    /// 1 + lambda' g_i
    ratios: Vec<f64>,
    iterations: usize,
    residual: f64,
}

struct DualStop {
    iterations: usize,
    residual: f64,
}

struct DualState {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

/// D(lambda), or None outside the domain 1 + lambda' g_i > 0.
fn dual_value(sample: &MomentSample, lambda: &[f64], ratios: &mut [f64]) -> Option<f64> {
    let (n, j) = (sample.n(), sample.j());
    ratios.iter_mut().for_each(|r| *r = 1.0);
    for c in 0..j {
        if lambda[c] != 0.0 {
            let col = sample.column(c);
            for i in 0..n {
                ratios[i] += lambda[c] * col[i];
            }
        }
    }
    let mut total = 0.0;
    for &r in ratios.iter() {
        if !(r > 0.0) || !r.is_finite() {
            return None;
        }
        total += r.ln();
    }
    Some(total)
}

fn dual_derivatives(sample: &MomentSample, ratios: &[f64], value: f64) -> DualState {
    let (n, j) = (sample.n(), sample.j());
    let mut grad = vec![0.0; j];
    let mut hess = vec![0.0; j * j];
    let mut row = vec![0.0; j];
    for i in 0..n {
        let inv = 1.0 / ratios[i];
        for c in 0..j {
            row[c] = sample.get(i, c) * inv;
            grad[c] += row[c];
        }
        for a in 0..j {
            for b in a..j {
                hess[a * j + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..j {
        for b in 0..a {
            hess[a * j + b] = hess[b * j + a];
        }
    }
    DualState { value, grad, hess }
}

/// Scaled projected-gradient KKT residual.
fn kkt_residual(lambda: &[f64], grad: &[f64], n: f64, sd: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(grad)
        .zip(sd)
        .map(|((&l, &g), &s)| {
            let r = if l < 0.0 { g.abs() } else { (-g).max(0.0) };
            r / (n * (1.0 + s))
        })
        .fold(0.0, f64::max)
}

/// Projected Newton ascent on D over lambda <= 0 with Armijo backtracking.
fn newton_dual(sample: &MomentSample, sd: &[f64]) -> std::result::Result<DualSolution, DualStop> {
    let (n, j) = (sample.n(), sample.j());
    let nf = n as f64;
    let colmax: Vec<f64> = (0..j)
        .map(|c| sample.column(c).iter().fold(0.0f64, |m, x| m.max(x.abs())))
        .collect();
    let mut lambda = vec![0.0; j];
    let mut ratios = vec![1.0; n];
    let mut trial = vec![0.0; j];
    let mut trial_ratios = vec![1.0; n];
    let mut direction = vec![0.0; j];
    let mut block = Vec::with_capacity(j * j);
    let mut free_idx = Vec::with_capacity(j);
    let mut rhs = Vec::with_capacity(j);

    let value0 = dual_value(sample, &lambda, &mut ratios).expect("lambda = 0 is interior");
    let mut state = dual_derivatives(sample, &ratios, value0);
    let mut residual = kkt_residual(&lambda, &state.grad, nf, sd);

    for iteration in 0..MAX_ITER {
        if residual <= KKT_TARGET {
            return Ok(DualSolution {
                lambda,
                ratios,
                iterations: iteration,
                residual,
            });
        }

        // Bounds treated as active: at (or within eps of) zero with the
        // gradient pushing outward.
        let width = lambda
            .iter()
            .zip(&state.grad)
            .enumerate()
            .map(|(c, (&l, &g))| {
                let h = state.hess[c * j + c].max(f64::MIN_POSITIVE);
                (l - (l + g / h).min(0.0)).abs()
            })
            .fold(0.0, f64::max);
        let eps = width.min(1e-3 / (1.0 + sd.iter().fold(0.0f64, |m, s| m.max(*s))));
        free_idx.clear();
        for c in 0..j {
            let pinned = lambda[c] >= -eps && state.grad[c] > 0.0;
            if !pinned {
                free_idx.push(c);
            }
            let h = state.hess[c * j + c].max(f64::MIN_POSITIVE);
            direction[c] = state.grad[c] / h;
        }
        let k = free_idx.len();
        if k > 0 {
            block.clear();
            for &a in &free_idx {
                for &b in &free_idx {
                    block.push(state.hess[a * j + b]);
                }
            }
            if !cholesky_in_place(&mut block, k) {
                // ridge fallback for a numerically singular Hessian
                block.clear();
                let ridge = 1e-10
                    * free_idx.iter().map(|&a| state.hess[a * j + a]).fold(0.0, f64::max).max(1e-300);
                for &a in &free_idx {
                    for &b in &free_idx {
                        block.push(state.hess[a * j + b] + if a == b { ridge } else { 0.0 });
                    }
                }
                if !cholesky_in_place(&mut block, k) {
                    return Err(DualStop {
                        iterations: iteration,
                        residual,
                    });
                }
            }
            rhs.clear();
            rhs.extend(free_idx.iter().map(|&a| state.grad[a]));
            cholesky_solve(&block, k, &mut rhs);
            for (p, &a) in free_idx.iter().enumerate() {
                direction[a] = rhs[p];
            }
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-20 {
            let mut slope = 0.0;
            for c in 0..j {
                trial[c] = (lambda[c] + alpha * direction[c]).min(0.0);
                slope += state.grad[c] * (trial[c] - lambda[c]);
            }
            if slope <= 0.0 {
                alpha *= 0.5;
                continue;
            }
            if let Some(v) = dual_value(sample, &trial, &mut trial_ratios) {
                let gain = v - state.value;
                let flat = gain.abs() <= 1e-13 * (1.0 + state.value.abs());
                let candidate = if gain >= ARMIJO_C * slope && gain > 0.0 {
                    Some(dual_derivatives(sample, &trial_ratios, v))
                } else if flat {
                    // D no longer resolves the improvement; judge by the gradient
                    let next = dual_derivatives(sample, &trial_ratios, v);
                    (kkt_residual(&trial, &next.grad, nf, sd) < residual).then_some(next)
                } else {
                    None
                };
                if let Some(next) = candidate {
                    accepted = true;
                    std::mem::swap(&mut lambda, &mut trial);
                    std::mem::swap(&mut ratios, &mut trial_ratios);
                    state = next;
                    break;
                }
            }
            alpha *= 0.5;
        }
        let scale = colmax.iter().zip(&lambda).map(|(g, l)| l.abs() * g).fold(0.0, f64::max);
        if lambda.iter().any(|l| !l.is_finite()) || scale > 1e12 {
            return Err(DualStop {
                iterations: iteration + 1,
                residual: f64::INFINITY,
            });
        }
        residual = kkt_residual(&lambda, &state.grad, nf, sd);
        if !accepted {
            // no ascent possible: accept if the loose tolerance holds
            if residual <= KKT_TOL {
                return Ok(DualSolution {
                    lambda,
                    ratios,
                    iterations: iteration + 1,
                    residual,
                });
            }
            return Err(DualStop {
                iterations: iteration + 1,
                residual,
            });
        }
    }
    if residual <= KKT_TOL {
        Ok(DualSolution {
            lambda,
            ratios,
            iterations: MAX_ITER,
            residual,
        })
    } else {
        Err(DualStop {
            iterations: MAX_ITER,
            residual,
        })
    }
}

//! Oracles and property checks shared by the test targets.
#![allow(dead_code)]

use momsel::el_tilt::{tilt, TiltOutcome, TiltResult};
use momsel::moment_model::{summarize, MomentSample};
use momsel::test_statistics::{aqlr, mmm, StatisticKind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

pub const INF: f64 = f64::INFINITY;

pub fn stat(kind: StatisticKind, v: &[f64], sigma: &DMatrix<f64>) -> f64 {
    match kind {
        StatisticKind::Mmm => mmm(v, sigma, 1.0).unwrap(),
        StatisticKind::Aqlr => aqlr(v, sigma, 1.0).unwrap().value,
    }
}

/// Random correlation-like SPD matrix built as A A' + eps I, rescaled to unit diagonal.
pub fn spd(j: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, j * j).prop_map(move |a| {
        let a = DMatrix::from_vec(j, j, a);
        let m = &a * a.transpose() + DMatrix::identity(j, j) * 0.05;
        let d: Vec<f64> = (0..j).map(|k| m[(k, k)].sqrt()).collect();
        DMatrix::from_fn(j, j, |r, c| m[(r, c)] / (d[r] * d[c]))
    })
}

pub fn instance() -> impl Strategy<Value = (Vec<f64>, DMatrix<f64>)> {
    (1usize..=5).prop_flat_map(|j| (prop::collection::vec(-3.0..3.0f64, j), spd(j)))
}

/// Exact QP value by enumerating which coordinates of t are free.
pub fn qp_by_enumeration(v: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let j = v.len();
    let inv = sigma.clone().try_inverse().unwrap();
    let mut best = INF;
    for mask in 0u32..(1 << j) {
        let free: Vec<usize> = (0..j).filter(|k| mask >> k & 1 == 1).collect();
        // Free coordinates minimise exactly; the rest sit at 0.
        let mut t = DVector::zeros(j);
        if !free.is_empty() {
            let fixed: Vec<usize> = (0..j).filter(|k| mask >> k & 1 == 0).collect();
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| inv[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                let mut s: f64 = free.iter().map(|&b| inv[(free[a], b)] * v[b]).sum();
                s += fixed.iter().map(|&b| inv[(free[a], b)] * v[b]).sum::<f64>();
                s
            });
            let tf = hff.lu().solve(&rhs).unwrap();
            for (a, &k) in free.iter().enumerate() {
                t[k] = tf[a];
            }
        }
        if t.iter().any(|x| *x < -1e-12) {
            continue;
        }
        let d = DVector::from_fn(j, |k, _| v[k] - t[k]);
        let q = (d.transpose() * &inv * &d)[(0, 0)];
        best = best.min(q);
    }
    best
}

/// Random rows; row 0 is strictly positive so the constraint set has interior.
pub fn feasible_sample() -> impl Strategy<Value = MomentSample> {
    (2usize..60, 1usize..5).prop_flat_map(|(n, j)| {
        (
            prop::collection::vec(0.05..2.0f64, j),
            prop::collection::vec(-3.0..1.5f64, (n - 1) * j),
        )
            .prop_map(move |(first, rest)| {
                let mut rows = vec![first];
                rows.extend(rest.chunks(j).map(<[f64]>::to_vec));
                MomentSample::from_rows(&rows).unwrap()
            })
            .prop_filter("non-degenerate columns", |s| summarize(s).is_ok())
    })
}

pub fn check_kkt(sample: &MomentSample, r: &TiltResult) -> Result<(), TestCaseError> {
    let (n, j) = (sample.n(), sample.j());
    let total: f64 = r.probabilities.iter().sum();
    prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
    let summary = summarize(sample).unwrap();
    for k in 0..j {
        let lam = r.multipliers[k];
        let g = r.tilted_mean[k];
        prop_assert!(lam <= 1e-12, "lambda {}", lam);
        prop_assert!(g >= -1e-8, "tilted mean {}", g);
        prop_assert!((lam * g).abs() <= 1e-8, "slackness {} * {}", lam, g);
        let direct: f64 = (0..n).map(|i| r.probabilities[i] * sample.get(i, k)).sum();
        prop_assert!((direct - g).abs() <= 1e-10 * (1.0 + g.abs()));
        if j == 1 && r.binding_set.contains(&k) {
            // one constraint: binding only when the sample mean is at or below 0
            prop_assert!(summary.mean[k] <= 1e-8, "binding but sample mean {}", summary.mean[k]);
        }
    }
    // with several constraints only the multiplier-weighted mean is signed
    let weighted: f64 = (0..j).map(|k| r.multipliers[k] * summary.mean[k]).sum();
    prop_assert!(weighted >= -1e-8, "lambda' g_hat = {}", weighted);
    for i in 0..n {
        let p = r.probabilities[i];
        prop_assert!(p > 0.0);
        let dot: f64 = (0..j).map(|k| r.multipliers[k] * sample.get(i, k)).sum();
        let implied = 1.0 / (n as f64 * (1.0 + dot));
        prop_assert!((p - implied).abs() <= 1e-8 * implied, "p {} vs implied {}", p, implied);
    }
    let objective: f64 = r.probabilities.iter().map(|p| p.ln()).sum();
    prop_assert!((objective - r.objective).abs() <= 1e-9 * (1.0 + objective.abs()));
    prop_assert!((r.dual_objective(sample) - r.objective).abs() <= 1e-8 * (1.0 + r.objective.abs()));
    Ok(())
}

/// Maximises sum ln p_i subject to sum p_i = 1 and sum p_i g_ij = 0 for j in
/// `binding`, by infeasible-start Newton on the primal. `None` if the
/// equality-constrained problem has no positive solution.
pub fn primal_with_binding(sample: &MomentSample, binding: &[usize]) -> Option<Vec<f64>> {
    let n = sample.n();
    let m = 1 + binding.len();
    let a = DMatrix::from_fn(m, n, |r, i| if r == 0 { 1.0 } else { sample.get(i, binding[r - 1]) });
    let mut b = DVector::zeros(m);
    b[0] = 1.0;
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    let mut nu = DVector::zeros(m);
    let residual = |p: &DVector<f64>, nu: &DVector<f64>| -> f64 {
        let dual = DVector::from_fn(n, |i, _| -1.0 / p[i]) + a.transpose() * nu;
        let primal = &a * p - &b;
        (dual.norm_squared() + primal.norm_squared()).sqrt()
    };
    for _ in 0..200 {
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            kkt[(i, i)] = 1.0 / (p[i] * p[i]);
            rhs[i] = 1.0 / p[i] - (a.transpose() * &nu)[i];
        }
        for r in 0..m {
            for i in 0..n {
                kkt[(n + r, i)] = a[(r, i)];
                kkt[(i, n + r)] = a[(r, i)];
            }
        }
        let primal_res = &a * &p - &b;
        for r in 0..m {
            rhs[n + r] = -primal_res[r];
        }
        let step = kkt.lu().solve(&rhs)?;
        let dp = step.rows(0, n).into_owned();
        let dnu = step.rows(n, m).into_owned();
        let before = residual(&p, &nu);
        let mut t = 1.0;
        loop {
            let trial = &p + &dp * t;
            if trial.iter().all(|x| *x > 0.0) {
                let trial_nu = &nu + &dnu * t;
                if residual(&trial, &trial_nu) <= (1.0 - 0.01 * t) * before {
                    p = trial;
                    nu = trial_nu;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-14 {
                return None;
            }
        }
        if residual(&p, &nu) < 1e-11 {
            return Some(p.iter().copied().collect());
        }
    }
    None
}

/// Best feasible candidate over every binding set.
pub fn enumeration_oracle(sample: &MomentSample) -> Option<(f64, Vec<f64>)> {
    let j = sample.j();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << j) {
        let binding: Vec<usize> = (0..j).filter(|k| mask >> k & 1 == 1).collect();
        let Some(p) = primal_with_binding(sample, &binding) else { continue };
        let ok = (0..j).all(|k| (0..sample.n()).map(|i| p[i] * sample.get(i, k)).sum::<f64>() >= -1e-10);
        if !ok {
            continue;
        }
        let value: f64 = p.iter().map(|x| x.ln()).sum();
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, p));
        }
    }
    best
}

/// Dense grid over the simplex for n <= 3, refined around the best point.
pub fn grid_oracle(sample: &MomentSample) -> f64 {
    let n = sample.n();
    assert!(n == 2 || n == 3);
    let value = |p: &[f64]| -> f64 {
        let ok = (0..sample.j()).all(|k| (0..n).map(|i| p[i] * sample.get(i, k)).sum::<f64>() >= 0.0);
        if ok && p.iter().all(|x| *x > 0.0) {
            p.iter().map(|x| x.ln()).sum()
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    let mut lo = vec![0.0f64; n - 1];
    let (mut width, mut step) = (1.0f64, 1e-3f64);
    for _round in 0..8 {
        let k = (width / step).round() as i64;
        let second = if n == 3 { k } else { 0 };
        for a in 0..=k {
            for b in 0..=second {
                let mut p = vec![lo[0] + a as f64 * step];
                if n == 3 {
                    p.push(lo[1] + b as f64 * step);
                }
                p.push(1.0 - p.iter().sum::<f64>());
                let v = value(&p);
                if v > best.0 {
                    best = (v, p);
                }
            }
        }
        // the optimum sits on a narrow ridge along binding constraints, so
        // the next window spans many old steps
        width = 20.0 * step;
        lo = best.1[..n - 1].iter().map(|c| c - width / 2.0).collect();
        step /= 10.0;
    }
    best.0
}

pub fn check_monotone(v: &[f64], sigma: &DMatrix<f64>, bump: &[f64]) -> Result<(), TestCaseError> {
    let w: Vec<f64> = v.iter().zip(bump).map(|(a, b)| a + b).collect();
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let (sv, sw) = (stat(kind, v, sigma), stat(kind, &w, sigma));
        prop_assert!(sw <= sv + 1e-10 * (1.0 + sv), "{kind}: {sw} > {sv}");
    }
    Ok(())
}

pub fn check_scale_invariance(v: &[f64], sigma: &DMatrix<f64>, d: &[f64]) -> Result<(), TestCaseError> {
    let j = v.len();
    let dv: Vec<f64> = (0..j).map(|k| d[k] * v[k]).collect();
    let ds = DMatrix::from_fn(j, j, |a, b| d[a] * sigma[(a, b)] * d[b]);
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let (s, t) = (stat(kind, v, sigma), stat(kind, &dv, &ds));
        prop_assert!((s - t).abs() <= 1e-8 * (1.0 + s), "{kind}: {s} vs {t}");
    }
    Ok(())
}

pub fn check_homogeneity(v: &[f64], sigma: &DMatrix<f64>, a: f64) -> Result<(), TestCaseError> {
    let av: Vec<f64> = v.iter().map(|x| a * x).collect();
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let (s, t) = (stat(kind, v, sigma), stat(kind, &av, sigma));
        prop_assert!(s >= 0.0 && t >= 0.0);
        prop_assert!((t - a * a * s).abs() <= 1e-8 * (1.0 + a * a * s), "{kind}: {t} vs {}", a * a * s);
    }
    Ok(())
}

pub fn check_zero_criterion(v: &[f64], sigma: &DMatrix<f64>, omit: &[bool]) -> Result<(), TestCaseError> {
    let v: Vec<f64> = v.iter().zip(omit).map(|(x, o)| if *o { INF } else { *x }).collect();
    let violated = v.iter().any(|x| *x < 0.0);
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let s = stat(kind, &v, sigma);
        prop_assert_eq!(s > 0.0, violated, "{}: S = {}", kind, s);
    }
    Ok(())
}

/// Stationarity and sign conditions of the QP solution, plus the exact value.
pub fn check_aqlr_kkt(v: &[f64], sigma: &DMatrix<f64>) -> Result<(), TestCaseError> {
    let sol = aqlr(v, sigma, 1.0).unwrap();
    let j = v.len();
    let inv = sigma.clone().try_inverse().unwrap();
    // gradient in t of (v - t)' inv (v - t)
    let d = DVector::from_fn(j, |k, _| v[k] - sol.t[k]);
    let grad = -(&inv * &d) * 2.0;
    for k in 0..j {
        prop_assert!(sol.t[k] >= 0.0);
        if sol.t[k] == 0.0 {
            prop_assert!(grad[k] >= -1e-8, "active gradient {}", grad[k]);
        } else {
            prop_assert!(grad[k].abs() <= 1e-8, "free gradient {}", grad[k]);
        }
    }
    let exact = qp_by_enumeration(v, sigma);
    prop_assert!((sol.value - exact).abs() <= 1e-8 * (1.0 + exact), "{} vs {}", sol.value, exact);
    Ok(())
}

pub fn check_tilt(sample: &MomentSample) -> Result<(), TestCaseError> {
    match tilt(sample).unwrap() {
        TiltOutcome::Solved(r) => check_kkt(sample, &r),
        TiltOutcome::Infeasible => Err(TestCaseError::fail("row 0 makes the problem strictly feasible")),
    }
}

/// Compares the solver with the enumeration oracle on `count` random samples
/// with n <= 6 and J <= 2 (half-integer entries, so ties and boundary cases
/// are common), and with the simplex grid on the first `grid` samples with
/// n <= 3. Returns the number of grid comparisons.
pub fn oracle_equivalence(count: usize, grid: usize, seed: u64) -> Result<usize, String> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut grids = 0;
    while checked < count {
        let n = rng.random_range(2..=6usize);
        let j = rng.random_range(1..=2usize);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..j).map(|_| (rng.random_range(-6..=4) as f64) / 2.0).collect())
            .collect();
        let sample = MomentSample::from_rows(&rows).unwrap();
        if summarize(&sample).is_err() {
            continue;
        }
        let outcome = tilt(&sample).map_err(|e| format!("{rows:?}: {e}"))?;
        match (&outcome, enumeration_oracle(&sample)) {
            (TiltOutcome::Solved(r), Some((value, p))) => {
                if (r.objective - value).abs() > 1e-5 {
                    return Err(format!("{rows:?}: {} vs {value}", r.objective));
                }
                if (0..n).any(|i| (r.probabilities[i] - p[i]).abs() > 1e-3) {
                    return Err(format!("{rows:?}: probabilities differ"));
                }
                if n <= 3 && grids < grid {
                    let g = grid_oracle(&sample);
                    if (r.objective - g).abs() > 1e-5 {
                        return Err(format!("{rows:?}: {} vs grid {g}", r.objective));
                    }
                    grids += 1;
                }
            }
            (TiltOutcome::Infeasible, None) => {}
            // feasible only on the boundary of the simplex: no finite likelihood
            (TiltOutcome::Infeasible, Some(_)) => return Err(format!("{rows:?}: oracle found a positive solution")),
            (TiltOutcome::Solved(_), None) => return Err(format!("{rows:?}: oracle found nothing")),
        }
        checked += 1;
    }
    Ok(grids)
}

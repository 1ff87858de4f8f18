use std::collections::BTreeMap;

use approx::assert_relative_eq;
use momsel::critical_values::{
    cms_critical_value, empirical_quantile, gms_asymptotic, gms_bootstrap, min_off_diagonal, rms_hook, rsw_test,
    DrawSet, RmsTables, MIN_DRAWS,
};
use momsel::mc_harness::{sample_stream, simulate_sample, SampleGenerator, TABLE3_ALTERNATIVE};
use momsel::moment_model::{make_toeplitz, studentized_scaled_mean, summarize};
use momsel::rng::Substream;
use momsel::*;
use nalgebra::{DMatrix, DVector};
use rand::distr::Uniform;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn gaussian_sample(kind: FamilyKind, mu: &[f64], n: usize, stream: u64) -> MomentSample {
    let family = CorrelationFamily::standard(kind, mu.len()).unwrap();
    simulate_sample(&family, mu, n, Substream::root(stream), 10.0).unwrap()
}

#[test]
fn omitting_everything_gives_zero() {
    let sample = gaussian_sample(FamilyKind::Neg, &[0.0, -0.3], 80, 4);
    let summary = summarize(&sample).unwrap();
    let all = SelectionVector::omit_all(2);
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let asy = gms_asymptotic(&summary, &all, kind, 0.05, 500, 1).unwrap();
        assert_eq!(asy.value, 0.0);
        let boot = gms_bootstrap(&sample, &all, kind, 0.05, 500, 1).unwrap();
        assert_eq!(boot.value, 0.0);
    }
}

#[test]
fn single_moment_matches_normal_quantile() {
    // P(min(0, Z)^2 <= x) = Phi(sqrt x), so the 0.95 quantile is z_.95^2
    let z = Normal::standard().inverse_cdf(0.95);
    let summary = MomentSummary::from_moments(100, DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap();
    let report = gms_asymptotic(&summary, &SelectionVector::zeros(1), StatisticKind::Mmm, 0.05, 1_000_000, 11).unwrap();
    assert!((z * z - 2.7055).abs() < 1e-3);
    assert!((report.value - z * z).abs() < 0.02, "{} vs {}", report.value, z * z);
    assert_eq!(report.method, Method::Gms);
    assert_eq!(report.mode, Mode::AsymptoticSim);
    assert_eq!(report.draws, 1_000_000);
}

#[test]
fn nested_selections_order_critical_values() {
    let sample = gaussian_sample(FamilyKind::Zero, &[0.0, 0.1, -0.1], 120, 2);
    let summary = summarize(&sample).unwrap();
    let inf = f64::INFINITY;
    let chain = [
        vec![0.0, 0.0, 0.0],
        vec![0.0, 0.5, 0.0],
        vec![0.3, 0.5, 0.0],
        vec![0.3, inf, 0.0],
        vec![inf, inf, 2.0],
        vec![inf, inf, inf],
    ];
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        for mode in [Mode::AsymptoticSim, Mode::Bootstrap] {
            let mut last = f64::INFINITY;
            for phi in &chain {
                let selection = SelectionVector::new(phi.clone());
                let v = match mode {
                    Mode::AsymptoticSim => gms_asymptotic(&summary, &selection, kind, 0.05, 2000, 9),
                    Mode::Bootstrap => gms_bootstrap(&sample, &selection, kind, 0.05, 2000, 9),
                }
                .unwrap()
                .value;
                assert!(v <= last, "{kind:?} {mode:?} {phi:?}: {v} > {last}");
                last = v;
            }
        }
    }
}

/// G*, sd* and correlation* of one resample given the picked row indices.
fn resample_draw(sample: &MomentSample, picks: &[usize]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, j) = (sample.n(), sample.j());
    let full = summarize(sample).unwrap();
    let rows: Vec<Vec<f64>> = picks.iter().map(|&i| sample.row(i)).collect();
    let mean: Vec<f64> = (0..j).map(|a| rows.iter().map(|r| r[a]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(j, j, |a, c| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[c] - mean[c])).sum::<f64>() / n as f64
    });
    let sd: Vec<f64> = (0..j).map(|a| cov[(a, a)].sqrt()).collect();
    let g: Vec<f64> = (0..j)
        .map(|a| (n as f64).sqrt() * (mean[a] - full.mean[a]) / sd[a])
        .collect();
    let omega = DMatrix::from_fn(j, j, |a, c| cov[(a, c)] / (sd[a] * sd[c]));
    (g, omega)
}

#[test]
fn three_row_bootstrap_by_enumeration() {
    let sample = MomentSample::from_rows(&[vec![1.0, -0.5], vec![-2.0, 0.7], vec![0.5, 1.5]]).unwrap();
    let summary = summarize(&sample).unwrap();
    let pick = Uniform::new(0usize, 3).unwrap();
    // a seed whose eight resamples all have two distinct rows
    let seed = (0..200u64)
        .find(|&s| {
            (0..8u64).all(|b| {
                let mut rng = Substream::root(s).child(b).rng();
                let first = rng.sample(pick);
                (1..3).any(|_| rng.sample(pick) != first)
            })
        })
        .unwrap();
    let set = DrawSet::bootstrap(&sample, &summary, 8, seed).unwrap();
    assert_eq!((set.len(), set.skipped()), (8, 0));

    let phi = SelectionVector::new(vec![0.0, 0.4]);
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let mut by_hand = Vec::new();
        for b in 0..8 {
            let mut rng = Substream::root(seed).child(b as u64).rng();
            let picks: Vec<usize> = (0..3).map(|_| rng.sample(pick)).collect();
            let (g, omega) = resample_draw(&sample, &picks);
            for a in 0..2 {
                assert!((set.centered(b)[a] - g[a]).abs() < 1e-9 * (1.0 + g[a].abs()));
                for c in 0..2 {
                    assert!((set.omega(b)[a * 2 + c] - omega[(a, c)]).abs() < 1e-9);
                }
            }
            let v: Vec<f64> = (0..2).map(|a| g[a] + phi.shifts[a]).collect();
            by_hand.push(kind.shifted(&v, &omega).unwrap());
        }
        by_hand.sort_by(f64::total_cmp);
        // ceil(0.95 * 8) = 8th smallest
        let expected = by_hand[7];
        let got = set.selection_quantile(kind, &phi, 0.95).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-9, epsilon = 1e-12);
        // ceil(0.5 * 8) = 4th smallest
        let median = set.selection_quantile(kind, &phi, 0.5).unwrap();
        assert_relative_eq!(median, by_hand[3], max_relative = 1e-9, epsilon = 1e-12);
    }
}

#[test]
fn draw_count_floor_enforced_at_entry_points() {
    let sample = gaussian_sample(FamilyKind::Zero, &[0.0, 0.0], 60, 3);
    let summary = summarize(&sample).unwrap();
    let phi = SelectionVector::zeros(2);
    assert!(matches!(
        gms_bootstrap(&sample, &phi, StatisticKind::Mmm, 0.05, MIN_DRAWS - 1, 1),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        gms_asymptotic(&summary, &phi, StatisticKind::Mmm, 0.05, 8, 1),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        gms_asymptotic(&summary, &phi, StatisticKind::Mmm, 0.5, 500, 1),
        Err(Error::Domain(_))
    ));
}

#[test]
fn singular_correlation_is_rejected() {
    let summary = MomentSummary::from_moments(
        50,
        DVector::from_vec(vec![0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
    )
    .unwrap();
    let r = gms_asymptotic(&summary, &SelectionVector::zeros(2), StatisticKind::Mmm, 0.05, 500, 1);
    assert!(matches!(r, Err(Error::NotPositiveDefinite)));
}

#[test]
fn too_many_degenerate_resamples() {
    // two distinct rows out of three: a resample repeats one row with probability 2/9 + 1/27
    let sample = MomentSample::from_rows(&[vec![1.0], vec![1.0], vec![-1.0]]).unwrap();
    let summary = summarize(&sample).unwrap();
    let r = DrawSet::bootstrap(&sample, &summary, 1000, 5);
    assert!(matches!(r, Err(Error::TooManyDegenerate { total: 1000, .. })), "{r:?}");
}

#[test]
fn quantile_order_statistic_convention() {
    let mut v: Vec<f64> = (1..=20).map(f64::from).rev().collect();
    assert_eq!(empirical_quantile(&mut v, 0.95).unwrap(), 19.0);
    assert_eq!(empirical_quantile(&mut v, 0.951).unwrap(), 20.0);
    assert_eq!(empirical_quantile(&mut v, 0.05).unwrap(), 1.0);
    assert_eq!(empirical_quantile(&mut v, 1.0).unwrap(), 20.0);
    assert!(empirical_quantile(&mut [], 0.5).is_err());
}

#[test]
fn critical_value_nondecreasing_in_level() {
    let sample = gaussian_sample(FamilyKind::Pos, &[-0.1, 0.0, 0.2, 0.4], 100, 8);
    let summary = summarize(&sample).unwrap();
    let set = DrawSet::bootstrap(&sample, &summary, 1000, 8).unwrap();
    let phi = SelectionVector::new(vec![0.0, 0.0, 0.5, f64::INFINITY]);
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let mut last = 0.0;
        for k in 1..=40 {
            let q = set.selection_quantile(kind, &phi, k as f64 / 40.0).unwrap();
            assert!(q >= last);
            assert!(q >= 0.0);
            last = q;
        }
    }
}

#[test]
fn reports_are_seed_deterministic() {
    let sample = gaussian_sample(FamilyKind::Neg, &[-0.1, 0.2, 0.0, 0.3], 90, 6);
    let run = || {
        let mut out = Vec::new();
        for procedure in [Method::Gms, Method::Cms, Method::CmsFc, Method::Rsw] {
            for mode in [Mode::Bootstrap, Mode::AsymptoticSim] {
                if procedure == Method::Rsw && mode == Mode::AsymptoticSim {
                    continue;
                }
                let mut config = TestConfig::new(StatisticKind::Aqlr, procedure);
                config.mode = mode;
                config.draws = 800;
                out.push(critical_values::run_test(&sample, &config, 21).unwrap());
            }
        }
        out
    };
    let first = run();
    assert_eq!(first, run());
    // a single worker thread must give the same draws as the default pool
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    assert_eq!(first, pool.install(run));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    assert_eq!(first, pool.install(run));
}

#[test]
fn cms_equals_gms_without_violations() {
    let sample = gaussian_sample(FamilyKind::Pos, &[0.3, 0.1, 0.8, 0.5], 70, 12);
    assert!(summarize(&sample).unwrap().mean.iter().all(|m| *m >= 0.0));
    let rule = SelectionRule::Phi1;
    for mode in [Mode::Bootstrap, Mode::AsymptoticSim] {
        for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
            let cms = cms_critical_value(&sample, kind, &rule, KappaSchedule::SqrtLogN, mode, 0.05, 600, 4, false).unwrap();
            let mut ctx = TestContext::new(&sample, mode, 600, 4).unwrap();
            let kappa = KappaSchedule::SqrtLogN.kappa(70).unwrap();
            let gms = ctx.gms(kind, &rule, kappa, 0.05).unwrap();
            assert_eq!(cms.value, gms.value);
            assert_eq!(cms.selection, gms.selection);
            assert!(!cms.tilt_fallback);
        }
    }
}

fn flip_fixture() -> MomentSample {
    let x = [-1.2, -0.7, -0.3, 0.1, 0.4, 0.9, 1.3, -0.5, 0.2, 0.8];
    let e = [0.1, -0.1, 0.05, -0.05, 0.0, 0.1, -0.1, 0.05, -0.05, 0.0];
    let rows: Vec<Vec<f64>> = x.iter().zip(e).map(|(a, b)| vec![a - 0.3, a + b + 0.2]).collect();
    MomentSample::from_rows(&rows).unwrap()
}

#[test]
fn tilting_flips_one_moment_out() {
    let sample = flip_fixture();
    let summary = summarize(&sample).unwrap();
    let kappa = (10f64).ln().sqrt();
    let xi = studentized_scaled_mean(&summary, kappa).unwrap();
    assert!(xi[0] < 0.0 && xi[1] > 0.8 && xi[1] <= 1.0, "{xi:?}");

    let mut ctx = TestContext::new(&sample, Mode::AsymptoticSim, 1000, 3).unwrap();
    let tilted = ctx.tilt().unwrap().solved().unwrap().tilted_mean.clone();
    let tilted_xi: Vec<f64> = (0..2).map(|a| (10f64).sqrt() * tilted[a] / (summary.sd(a) * kappa)).collect();
    assert!(tilted_xi[1] > 1.0, "{tilted_xi:?}");
    assert!(tilted_xi[0].abs() < 1e-8);

    let rule = SelectionRule::Phi1;
    let gms = ctx.gms(StatisticKind::Mmm, &rule, kappa, 0.05).unwrap();
    let cms = ctx.cms(StatisticKind::Mmm, &rule, kappa, 0.05, false).unwrap();
    assert_eq!(gms.selection.shifts, vec![0.0, 0.0]);
    assert_eq!(cms.selection.shifts, vec![0.0, f64::INFINITY]);
    assert_eq!(cms.selection.omitted_count(), gms.selection.omitted_count() + 1);
    assert!(cms.value <= gms.value);
}

#[test]
fn infeasible_tilt_falls_back() {
    let sample = MomentSample::from_rows(&[vec![-2.0, -1.0], vec![-1.0, -0.5], vec![-3.0, -0.2]]).unwrap();
    let report = cms_critical_value(
        &sample,
        StatisticKind::Mmm,
        &SelectionRule::Phi1,
        KappaSchedule::SqrtLogN,
        Mode::AsymptoticSim,
        0.05,
        500,
        2,
        false,
    )
    .unwrap();
    assert!(report.tilt_fallback);
    assert_eq!(report.tilt.unwrap().status, el_tilt::TiltStatus::Infeasible);
    let mut ctx = TestContext::new(&sample, Mode::AsymptoticSim, 500, 2).unwrap();
    let kappa = KappaSchedule::SqrtLogN.kappa(3).unwrap();
    assert_eq!(ctx.gms(StatisticKind::Mmm, &SelectionRule::Phi1, kappa, 0.05).unwrap().value, report.value);
}

#[test]
fn cms_below_gms_under_local_violation() {
    let n = 250;
    let family = CorrelationFamily::standard(FamilyKind::Pos, 4).unwrap();
    let mu: Vec<f64> = TABLE3_ALTERNATIVE.iter().map(|m| m / (n as f64).sqrt()).collect();
    let generator = SampleGenerator::new(&family, &mu, n, 10.0).unwrap();
    let rule = SelectionRule::Phi1;
    let kappa = KappaSchedule::SqrtLogN.kappa(n).unwrap();
    let reps = 1000;
    let ordered = (0..reps)
        .filter(|&r| {
            let sample = generator.draw(sample_stream(17, r)).unwrap();
            let mut ctx = TestContext::new(&sample, Mode::AsymptoticSim, 500, r as u64).unwrap();
            let gms = ctx.gms(StatisticKind::Mmm, &rule, kappa, 0.05).unwrap();
            let cms = ctx.cms(StatisticKind::Mmm, &rule, kappa, 0.05, false).unwrap();
            cms.value <= gms.value
        })
        .count();
    assert!(ordered as f64 >= 0.95 * reps as f64, "{ordered} of {reps}");
}

#[test]
fn gms_and_cms_agree_when_all_moments_bind() {
    let n = 250;
    let family = CorrelationFamily::standard(FamilyKind::Zero, 2).unwrap();
    let generator = SampleGenerator::new(&family, &[0.0, 0.0], n, 10.0).unwrap();
    let reps = 2000;
    let mut gms_rejects = 0;
    let mut cms_rejects = 0;
    for r in 0..reps {
        let sample = generator.draw(sample_stream(23, r)).unwrap();
        let mut ctx = TestContext::new(&sample, Mode::AsymptoticSim, 500, r as u64).unwrap();
        let mut config = TestConfig::new(StatisticKind::Mmm, Method::Gms);
        config.mode = Mode::AsymptoticSim;
        gms_rejects += ctx.decide(&config).unwrap().reject as usize;
        config.procedure = Method::Cms;
        cms_rejects += ctx.decide(&config).unwrap().reject as usize;
    }
    let diff = (gms_rejects as f64 - cms_rejects as f64).abs() / reps as f64;
    assert!(diff <= 0.01, "GMS {gms_rejects} vs CMS {cms_rejects}");
}

#[test]
fn rsw_default_beta_and_first_stage() {
    let sample = gaussian_sample(FamilyKind::Neg, &[-0.4, 0.1], 100, 31);
    let summary = summarize(&sample).unwrap();
    let decision = rsw_test(&sample, StatisticKind::Mmm, 0.05, None, 1000, 7).unwrap();
    let supp = decision.critical_value.supplementary.clone().unwrap();
    assert_eq!(supp.beta, 0.005);
    assert_eq!(TestConfig::new(StatisticKind::Mmm, Method::Rsw).beta(), 0.005);

    // bound is the beta-quantile of min_j(-G*_j) over the shared draws
    let set = DrawSet::bootstrap(&sample, &summary, 1000, 7).unwrap();
    let mut minima: Vec<f64> = (0..set.len())
        .map(|b| set.centered(b).iter().map(|g| -g).fold(f64::INFINITY, f64::min))
        .collect();
    minima.sort_by(f64::total_cmp);
    let k = (0.005 * set.len() as f64).ceil() as usize;
    assert_eq!(supp.rectangle_bound, minima[k - 1]);
    for a in 0..2 {
        let lower = summary.mean[a] + summary.sd(a) * supp.rectangle_bound / 10.0;
        assert_relative_eq!(supp.lower_endpoints[a], lower, max_relative = 1e-12);
        assert_eq!(supp.lambda_star[a], lower.max(0.0));
    }
    assert_eq!(supp.first_stage, supp.lower_endpoints.iter().any(|l| *l < 0.0));
    assert!(supp.first_stage);
    assert_eq!(decision.first_stage, Some(true));
    assert_eq!(decision.reject, decision.statistic > decision.critical_value.value);
}

#[test]
fn rsw_never_rejects_inside_the_orthant() {
    let sample = gaussian_sample(FamilyKind::Zero, &[3.0, 2.5, 4.0], 100, 5);
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let d = rsw_test(&sample, kind, 0.05, None, 500, 3).unwrap();
        let supp = d.critical_value.supplementary.as_ref().unwrap();
        assert!(!supp.first_stage);
        assert!(!d.reject);
        assert_eq!(d.first_stage, Some(false));
    }
    assert!(matches!(
        rsw_test(&sample, StatisticKind::Mmm, 0.05, Some(0.05), 500, 3),
        Err(Error::Domain(_))
    ));
}

fn flat_tables(kappa: f64, eta1: f64, eta2: f64, j: usize) -> RmsTables {
    RmsTables {
        delta_grid: vec![-1.0, 1.0],
        kappa: vec![kappa, kappa],
        eta1: vec![eta1, eta1],
        eta2_by_j: BTreeMap::from([(j.to_string(), eta2)]),
    }
}

#[test]
fn rms_with_degenerate_tables() {
    let n = 120;
    let sample = gaussian_sample(FamilyKind::Neg, &[-0.05, 0.1, 0.0, 0.2], n, 41);
    let kappa = (n as f64).ln().sqrt();
    let rule = SelectionRule::Phi1;
    for kind in [StatisticKind::Mmm, StatisticKind::Aqlr] {
        let mut ctx = TestContext::new(&sample, Mode::Bootstrap, 700, 5).unwrap();
        let gms = ctx.gms(kind, &rule, kappa, 0.05).unwrap();

        let plain = rms_hook(&sample, kind, &rule, 0.05, Some(&flat_tables(kappa, 0.0, 0.0, 4)), Mode::Bootstrap, 700, 5).unwrap();
        assert_eq!(plain.value, gms.value);
        assert_eq!(plain.method, Method::Rms);
        assert_eq!(plain.kappa, Some(kappa));
        assert_eq!(plain.correction, Some(0.0));

        let shifted = rms_hook(&sample, kind, &rule, 0.05, Some(&flat_tables(kappa, 0.0, 0.1, 4)), Mode::Bootstrap, 700, 5).unwrap();
        assert_eq!(shifted.value, gms.value + 0.1);
        assert_eq!(shifted.correction, Some(0.1));
    }
    assert!(matches!(
        rms_hook(&sample, StatisticKind::Mmm, &rule, 0.05, None, Mode::Bootstrap, 700, 5),
        Err(Error::MissingTable(_))
    ));
    // no eta2 entry for J = 4
    assert!(matches!(
        rms_hook(&sample, StatisticKind::Mmm, &rule, 0.05, Some(&flat_tables(kappa, 0.0, 0.1, 2)), Mode::Bootstrap, 700, 5),
        Err(Error::MissingTable(_))
    ));
    assert!(matches!(
        TestConfig::new(StatisticKind::Mmm, Method::Rms).validate(),
        Err(Error::MissingTable(_))
    ));
}

#[test]
fn rms_tables_from_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rms.json");
    std::fs::write(
        &path,
        r#"{"delta_grid": [-1, 0, 1], "kappa": [1.5, 2.0, 3.0], "eta1": [0.0, 0.1, 0.2], "eta2_by_J": {"2": 0.05}}"#,
    )
    .unwrap();
    let t = RmsTables::from_json_path(&path).unwrap();
    assert_relative_eq!(t.kappa_at(-0.9), 1.55, max_relative = 1e-12);
    assert_relative_eq!(t.eta1_at(0.5), 0.15, max_relative = 1e-12);
    assert_eq!(t.eta2(2).unwrap(), 0.05);
}

#[test]
fn min_off_diagonal_of_negative_family() {
    let omega = make_toeplitz(&CorrelationFamily::standard(FamilyKind::Neg, 2).unwrap()).unwrap();
    assert_relative_eq!(min_off_diagonal(&omega).unwrap(), -0.9, max_relative = 1e-15);
    assert!(min_off_diagonal(&DMatrix::identity(1, 1)).is_err());
}

#[test]
fn report_value_is_nonnegative_and_json_round_trips() {
    let sample = gaussian_sample(FamilyKind::Pos, &[-0.2, 0.3], 60, 13);
    for procedure in [Method::Gms, Method::Cms, Method::Rsw] {
        let mut config = TestConfig::new(StatisticKind::Aqlr, procedure);
        config.draws = 300;
        let d = critical_values::run_test(&sample, &config, 2).unwrap();
        assert!(d.critical_value.value >= 0.0);
        let text = serde_json::to_string(&d).unwrap();
        let back: TestDecision = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
    }
}

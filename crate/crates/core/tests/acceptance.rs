//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a single pass/fail line. Monte-Carlo criteria run R = 500
//! replicates and share per-scenario runs across criteria.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sampfuse::data::{CombinedSample, UnitRecord};
use sampfuse::estimators::{aipw_report, ipw_report, DesignVariance, PoissonDesign};
use sampfuse::outcome::{fit_outcome, predict, OutcomeFamily};
use sampfuse::propensity::{fit_lasso, fit_newton, pseudo_risk, PenaltyConfig};
use sampfuse::sim::{
    generate_population, run_monte_carlo, EstimatorKind, MetricsRow, ScenarioSpec,
};
use sampfuse::solvers::{kkt_max_violation, lasso_cd, wls_solve, SolverConfig, WlsProblem};
use sampfuse::Membership;

const REPS: usize = 500;
const SEED: u64 = 20250826;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[{}] {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion}: {detail}");
}

fn mc_run(
    cell: &'static OnceLock<Vec<MetricsRow>>,
    scenario: u8,
    methods: &[EstimatorKind],
) -> &'static [MetricsRow] {
    cell.get_or_init(|| {
        let spec = ScenarioSpec::new(scenario).unwrap();
        run_monte_carlo(&spec, methods, REPS, SEED, 1).unwrap()
    })
}

fn scenario1() -> &'static [MetricsRow] {
    static CELL: OnceLock<Vec<MetricsRow>> = OnceLock::new();
    mc_run(&CELL, 1, &[EstimatorKind::AipwOalasso])
}

fn scenario2() -> &'static [MetricsRow] {
    static CELL: OnceLock<Vec<MetricsRow>> = OnceLock::new();
    mc_run(
        &CELL,
        2,
        &[
            EstimatorKind::IpwLasso,
            EstimatorKind::IpwOalasso,
            EstimatorKind::AipwScadUnion,
        ],
    )
}

fn scenario3() -> &'static [MetricsRow] {
    static CELL: OnceLock<Vec<MetricsRow>> = OnceLock::new();
    mc_run(
        &CELL,
        3,
        &[EstimatorKind::IpwLogistic, EstimatorKind::AipwOalasso],
    )
}

fn scenario4() -> &'static [MetricsRow] {
    static CELL: OnceLock<Vec<MetricsRow>> = OnceLock::new();
    mc_run(
        &CELL,
        4,
        &[
            EstimatorKind::IpwLogistic,
            EstimatorKind::AipwLogisticFlex,
            EstimatorKind::AipwBenkeser,
        ],
    )
}

fn row<'a>(rows: &'a [MetricsRow], name: &str) -> &'a MetricsRow {
    rows.iter()
        .find(|r| r.estimator == name)
        .unwrap_or_else(|| panic!("no row for {name}"))
}

#[test]
fn criterion_1_scenario1_aipw_oalasso() {
    let r = row(scenario1(), "aipw-oalasso");
    let pass =
        r.valid && r.pct_bias.abs() <= 0.3 && r.mse <= 0.02 && (90.0..=98.0).contains(&r.coverage);
    verdict(
        "criterion 1 (scenario 1 AIPW-OALASSO)",
        pass,
        &format!(
            "%B = {:.3} (|.| <= 0.3), MSE = {:.4} (<= 0.02), coverage = {:.1} (in [90, 98])",
            r.pct_bias, r.mse, r.coverage
        ),
    );
}

#[test]
fn criterion_2_scenario2_ipw_lasso_undercoverage() {
    let r = row(scenario2(), "ipw-lasso");
    let pass = r.valid && r.coverage <= 45.0 && r.pct_bias <= -1.5;
    verdict(
        "criterion 2 (scenario 2 IPW-LASSO under-coverage)",
        pass,
        &format!(
            "coverage = {:.1} (<= 45), %B = {:.3} (<= -1.5)",
            r.coverage, r.pct_bias
        ),
    );
}

#[test]
fn criterion_3_scenario3_mse_ordering() {
    let rows = scenario3();
    let oal = row(rows, "aipw-oalasso");
    let ipw = row(rows, "ipw-logistic");
    let pass = oal.valid && ipw.valid && oal.mse * 5.0 <= ipw.mse;
    verdict(
        "criterion 3 (scenario 3 MSE ordering)",
        pass,
        &format!(
            "MSE(AIPW-OALASSO) = {:.4}, MSE(IPW-Logistic) = {:.4}, ratio = {:.1}",
            oal.mse,
            ipw.mse,
            ipw.mse / oal.mse
        ),
    );
}

#[test]
fn criterion_4_scenario4_model_misspecification() {
    let rows = scenario4();
    let ipw = row(rows, "ipw-logistic");
    let flex = row(rows, "aipw-logistic-flex");
    let benk = row(rows, "aipw-benkeser");
    let pass = ipw.valid
        && flex.valid
        && benk.valid
        && ipw.pct_bias >= 2.5
        && ipw.coverage <= 5.0
        && flex.pct_bias.abs() <= 1.0
        && flex.coverage >= 75.0
        && benk.coverage >= 85.0;
    verdict(
        "criterion 4 (scenario 4 misspecification)",
        pass,
        &format!(
            "IPW %B = {:.2} (>= 2.5) cov = {:.1} (<= 5); flex %B = {:.2} (|.| <= 1.0) cov = {:.1} (>= 75); collaborative cov = {:.1} (>= 85)",
            ipw.pct_bias, ipw.coverage, flex.pct_bias, flex.coverage, benk.coverage
        ),
    );
}

#[test]
fn criterion_5_scenario2_selection_frequencies() {
    let rows = scenario2();
    let lasso = row(rows, "ipw-lasso").selection.as_ref().unwrap();
    let oal = row(rows, "ipw-oalasso").selection.as_ref().unwrap();
    let scad = row(rows, "aipw-scad-union").selection.as_ref().unwrap();
    // x1..x4 are indices 0..3; the instruments x5, x6 are indices 4, 5
    let oal_x12 = oal[0] >= 90.0 && oal[1] >= 90.0;
    let oal_vs_lasso = oal[2] >= 2.0 * lasso[2] && oal[3] >= 2.0 * lasso[3];
    let scad_signal = scad[0] >= 95.0 && scad[1] >= 95.0 && scad[2] >= 95.0;
    let scad_instruments = scad[4] <= 10.0 && scad[5] <= 10.0;
    let pass = oal_x12 && oal_vs_lasso && scad_signal && scad_instruments;
    verdict(
        "criterion 5 (scenario 2 selection frequencies)",
        pass,
        &format!(
            "OALASSO x1/x2 = {:.0}/{:.0} (>= 90); OALASSO x3/x4 = {:.0}/{:.0} vs LASSO {:.0}/{:.0} (>= 2x); SCAD x1/x2/x3 = {:.0}/{:.0}/{:.0} (>= 95); SCAD x5/x6 = {:.1}/{:.1} (<= 10)",
            oal[0], oal[1], oal[2], oal[3], lasso[2], lasso[3], scad[0], scad[1], scad[2], scad[4], scad[5]
        ),
    );
}

#[test]
fn criterion_6_solver_oracle_equivalence() {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_kkt = 0.0f64;
    let mut worst_ls = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(20..60);
        let q = rng.gen_range(2..6);
        let x = DMatrix::from_fn(n, q, |i, j| {
            if j == 0 {
                1.0
            } else {
                rng_normal(&mut rng, 17 + i * q + j)
            }
        });
        let beta_true = DVector::from_fn(q, |j, _| if j % 2 == 0 { 1.0 } else { -0.5 });
        let y = &x * &beta_true + DVector::from_fn(n, |i, _| 0.3 * rng_normal(&mut rng, i));
        let w = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
        let mut pf = DVector::from_element(q, 1.0);
        pf[0] = 0.0;
        let lambda = rng.gen_range(0.01..1.0) * n as f64 * 0.05;
        let prob = WlsProblem::new(x.clone(), y.clone(), w.clone(), pf.clone(), lambda).unwrap();
        let beta = lasso_cd(&prob, &cfg).unwrap();
        worst_kkt = worst_kkt.max(kkt_max_violation(&prob, &beta) / (1.0 + y.amax()));

        let prob0 = prob.with_lambda(0.0);
        let b_cd = lasso_cd(&prob0, &cfg).unwrap();
        let b_ne = wls_solve(&prob0).unwrap();
        worst_ls = worst_ls.max((b_cd - b_ne).amax());
    }
    let pass = worst_kkt <= 1e-6 && worst_ls <= 1e-8;
    verdict(
        "criterion 6 (solver oracle equivalence)",
        pass,
        &format!(
            "worst scaled KKT violation = {worst_kkt:.2e} (<= 1e-6); worst lambda=0 gap vs normal equations = {worst_ls:.2e} (<= 1e-8)"
        ),
    );
}

fn rng_normal(rng: &mut ChaCha8Rng, _tag: usize) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn toy_sample(seed: u64, n_a: usize, n_b: usize, p: usize) -> CombinedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for i in 0..n_a {
        let x: Vec<f64> = (0..p).map(|j| rng_normal(&mut rng, i + j)).collect();
        let y = 1.0 + x.iter().sum::<f64>() + 0.5 * rng_normal(&mut rng, i);
        records.push(UnitRecord::a_unit(x, y));
    }
    for i in 0..n_b {
        let x: Vec<f64> = (0..p).map(|j| rng_normal(&mut rng, i + j)).collect();
        let d = rng.gen_range(5.0..40.0);
        records.push(UnitRecord::b_unit(x, d));
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    CombinedSample::new(records, names).unwrap()
}

#[test]
fn criterion_7_newton_grid_oracle() {
    // two-parameter reduction: intercept plus one covariate
    let sample = toy_sample(707, 80, 200, 1);
    let fit = fit_newton(&sample, &[0]).unwrap();
    let risk_star = pseudo_risk(&sample, &[0], &fit.beta);
    let mut worst_margin = f64::INFINITY;
    let mut pass = true;
    let mut k0 = -20i32;
    while k0 <= 20 {
        let mut k1 = -20i32;
        while k1 <= 20 {
            let beta = DVector::from_vec(vec![
                fit.beta[0] + 0.05 * k0 as f64,
                fit.beta[1] + 0.05 * k1 as f64,
            ]);
            let risk = pseudo_risk(&sample, &[0], &beta);
            worst_margin = worst_margin.min(risk - risk_star);
            if risk + 1e-9 < risk_star {
                pass = false;
            }
            k1 += 1;
        }
        k0 += 1;
    }
    verdict(
        "criterion 7 (Newton grid oracle)",
        pass,
        &format!(
            "pseudo-risk at solution = {risk_star:.6}; smallest grid margin = {worst_margin:.3e} (>= 0)"
        ),
    );
}

#[test]
fn criterion_8_poisson_design_variance() {
    // fixed finite population of values with known inclusion probabilities
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let n = 400;
    let a: Vec<f64> = (0..n)
        .map(|i| 1.0 + rng_normal(&mut rng, i).abs())
        .collect();
    let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.6)).collect();
    let design = PoissonDesign;
    let total_true: f64 = a.iter().sum();
    let mut totals = Vec::with_capacity(10_000);
    let mut vp_sum = 0.0;
    for _ in 0..10_000 {
        let mut t = 0.0;
        let mut sa = Vec::new();
        let mut spi = Vec::new();
        let mut sd = Vec::new();
        for i in 0..n {
            if rng.gen::<f64>() < pi[i] {
                t += a[i] / pi[i];
                sa.push(a[i]);
                spi.push(pi[i]);
                sd.push(1.0 / pi[i]);
            }
        }
        totals.push(t);
        vp_sum += design.scalar(&spi, &sd, &sa).unwrap();
    }
    let mean_vp = vp_sum / totals.len() as f64;
    let mean_t = totals.iter().sum::<f64>() / totals.len() as f64;
    let emp_var = totals
        .iter()
        .map(|t| (t - mean_t) * (t - mean_t))
        .sum::<f64>()
        / (totals.len() - 1) as f64;
    let rel = (mean_vp - emp_var).abs() / emp_var;
    let pass = rel <= 0.05 && (mean_t - total_true).abs() < 0.05 * total_true;
    verdict(
        "criterion 8 (Poisson design variance)",
        pass,
        &format!(
            "mean plug-in V_p = {mean_vp:.1}, empirical variance = {emp_var:.1}, relative gap = {:.3} (<= 0.05)",
            rel
        ),
    );
}

#[test]
fn criterion_9_property_suite() {
    let design = PoissonDesign;
    let sample = toy_sample(909, 60, 150, 3);
    let all = vec![0usize, 1, 2];
    let pfit = fit_newton(&sample, &all).unwrap();
    let base_ipw = ipw_report(&sample, &pfit, "ipw", &design).unwrap();

    // translation and scale equivariance of the outcome
    let shifted = {
        let recs: Vec<UnitRecord> = sample
            .records()
            .iter()
            .map(|r| UnitRecord {
                y: r.y.map(|y| 3.0 * y + 7.0),
                ..r.clone()
            })
            .collect();
        CombinedSample::new(recs, sample.names().to_vec()).unwrap()
    };
    let pfit_s = fit_newton(&shifted, &all).unwrap();
    let ipw_s = ipw_report(&shifted, &pfit_s, "ipw", &design).unwrap();
    let equivariant_ipw = (ipw_s.mu_hat - (3.0 * base_ipw.mu_hat + 7.0)).abs() < 1e-8;

    let of = fit_outcome(&sample, OutcomeFamily::Linear, &all).unwrap();
    let ma = predict(&of, &sample, Membership::A).unwrap();
    let mb = predict(&of, &sample, Membership::B).unwrap();
    let base_aipw = aipw_report(&sample, &pfit, &ma, &mb, "aipw", of.kind, &design).unwrap();
    let of_s = fit_outcome(&shifted, OutcomeFamily::Linear, &all).unwrap();
    let ma_s = predict(&of_s, &shifted, Membership::A).unwrap();
    let mb_s = predict(&of_s, &shifted, Membership::B).unwrap();
    let aipw_s = aipw_report(&shifted, &pfit_s, &ma_s, &mb_s, "aipw", of_s.kind, &design).unwrap();
    let equivariant_aipw = (aipw_s.mu_hat - (3.0 * base_aipw.mu_hat + 7.0)).abs() < 1e-8;

    // AIPW reduces to IPW when the outcome model is identically zero
    let zeros_a = vec![0.0; sample.n_a()];
    let zeros_b = vec![0.0; sample.n_b()];
    let aipw_null =
        aipw_report(&sample, &pfit, &zeros_a, &zeros_b, "aipw", of.kind, &design).unwrap();
    let reduces = (aipw_null.mu_hat - base_ipw.mu_hat).abs() < 1e-10;

    // penalty-off equivalence: a lasso fit forced to lambda = 0 matches Newton
    let penalty = PenaltyConfig {
        lambda_grid: Some(vec![0.0]),
        seed: 11,
        ..PenaltyConfig::default()
    };
    let lfit = fit_lasso(&sample, &penalty).unwrap();
    let penalty_off = (0..=sample.p())
        .map(|k| (lfit.beta[k] - pfit.beta[k]).abs())
        .fold(0.0f64, f64::max)
        < 1e-5;

    // determinism of the full pipeline under a fixed seed
    let spec = ScenarioSpec::new(1).unwrap();
    let m = [EstimatorKind::IpwLogistic];
    let r1 = run_monte_carlo(&spec, &m, 2, 99, 1).unwrap();
    let r2 = run_monte_carlo(&spec, &m, 2, 99, 1).unwrap();
    let deterministic = r1[0].pct_bias == r2[0].pct_bias
        && r1[0].mse == r2[0].mse
        && r1[0].coverage == r2[0].coverage;

    let pass = equivariant_ipw && equivariant_aipw && reduces && penalty_off && deterministic;
    verdict(
        "criterion 9 (property suite)",
        pass,
        &format!(
            "IPW equivariance {equivariant_ipw}; AIPW equivariance {equivariant_aipw}; null-outcome reduction {reduces}; penalty-off equivalence {penalty_off}; determinism {deterministic}"
        ),
    );
}

#[test]
fn population_generator_sanity() {
    let spec = ScenarioSpec::new(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pop = generate_population(&spec, &mut rng);
    assert_eq!(pop.x.len(), 10_000);
    assert_eq!(pop.x[0].len(), 44);
}

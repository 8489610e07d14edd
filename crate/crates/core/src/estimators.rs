//! IPW and AIPW estimators of the finite-population mean with plug-in
//! variance estimators and Wald confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::CombinedSample;
use crate::error::{Error, Result};
use crate::outcome::OutcomeKind;
use crate::propensity::{PropensityFit, PropensityMethod};

/// Design-based variance of a weighted total over B. The built-in rule covers
/// Poisson sampling; other designs plug in through this trait.
pub trait DesignVariance {
    /// V_p(sum_B d_i a_i) for scalar values a_i.
    fn scalar(&self, pi: &[f64], d: &[f64], a: &[f64]) -> Result<f64>;
    /// V_p of the vector total with per-unit vectors in the rows of `a`.
    fn matrix(&self, pi: &[f64], d: &[f64], a: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// Plug-in estimator under Poisson sampling: sum_B (1 - pi_i) d_i^2 a_i a_i'.
pub struct PoissonDesign;

impl DesignVariance for PoissonDesign {
    fn scalar(&self, pi: &[f64], d: &[f64], a: &[f64]) -> Result<f64> {
        check_pi(pi)?;
        Ok(pi
            .iter()
            .zip(d.iter())
            .zip(a.iter())
            .map(|((&pi, &d), &a)| (1.0 - pi) * d * d * a * a)
            .sum())
    }

    fn matrix(&self, pi: &[f64], d: &[f64], a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_pi(pi)?;
        let q = a.ncols();
        let mut v = DMatrix::zeros(q, q);
        for i in 0..a.nrows() {
            let c = (1.0 - pi[i]) * d[i] * d[i];
            let row = a.row(i);
            for s in 0..q {
                for t in 0..q {
                    v[(s, t)] += c * row[s] * row[t];
                }
            }
        }
        Ok(v)
    }
}

fn check_pi(pi: &[f64]) -> Result<()> {
    if pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Design(
            "Poisson design variance needs inclusion probabilities in (0, 1] for every B unit"
                .into(),
        ));
    }
    Ok(())
}

/// Variance pieces surfaced in reports for diagnosis.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceComponents {
    /// b2 (IPW) or b3 (AIPW).
    pub b: Vec<f64>,
    /// b' D b (IPW) or W (AIPW).
    pub design_term: f64,
    /// First (A-sum) variance term.
    pub a_term: f64,
    pub h_n: Option<f64>,
    pub t_vals: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodInfo {
    pub estimator: String,
    pub propensity: PropensityMethod,
    pub outcome: Option<OutcomeKind>,
    pub lambda: Option<f64>,
    pub active_set: Vec<String>,
    pub clamp_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub mu_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub method: MethodInfo,
    pub components: Option<VarianceComponents>,
}

pub fn wald_ci(mu_hat: f64, se: f64) -> (f64, f64) {
    (mu_hat - 1.96 * se, mu_hat + 1.96 * se)
}

fn pi_d_b(sample: &CombinedSample) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pis = Vec::with_capacity(sample.n_b());
    let mut ds = Vec::with_capacity(sample.n_b());
    for r in sample.b_records() {
        let d = r.d.unwrap();
        let pi =
            r.pi.ok_or_else(|| Error::Design("B unit lacks an inclusion probability".into()))?;
        pis.push(pi);
        ds.push(d);
    }
    Ok((pis, ds))
}

/// IPW point estimate: mu = sum_A Y_i / p_i divided by N = sum_A 1 / p_i.
pub fn ipw_mean(sample: &CombinedSample, pfit: &PropensityFit) -> Result<f64> {
    if sample.n_a() == 0 {
        return Err(Error::InsufficientData("empty sample A".into()));
    }
    let y = sample.y_a();
    let mut num = 0.0;
    let mut den = 0.0;
    for (yi, &p) in y.iter().zip(pfit.p_a.iter()) {
        num += yi / p;
        den += 1.0 / p;
    }
    Ok(num / den)
}

/// Solve b M = v  (i.e. b = v M^{-1}) with a ridge fallback on singular M.
fn solve_sandwich(m: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let q = m.ncols();
    match m.clone().cholesky() {
        Some(chol) => Ok(chol.solve(v)),
        None => {
            let ridge = 1e-8 * m.trace() / q as f64 + 1e-300;
            log::warn!("singular B-sum matrix in variance; adding ridge {ridge:.3e}");
            let mut m2 = m.clone();
            for a in 0..q {
                m2[(a, a)] += ridge;
            }
            m2.cholesky()
                .map(|c| c.solve(v))
                .ok_or_else(|| Error::Singular("B-sum matrix in variance".into()))
        }
    }
}

/// sum_B d p (1 - p) x x' over the variance design.
fn b_sum_matrix(xb: &DMatrix<f64>, p_b: &[f64], d_b: &[f64]) -> DMatrix<f64> {
    let q = xb.ncols();
    let mut m = DMatrix::zeros(q, q);
    for i in 0..xb.nrows() {
        let c = d_b[i] * p_b[i] * (1.0 - p_b[i]);
        let row = xb.row(i);
        for a in 0..q {
            let ca = c * row[a];
            for b in a..q {
                m[(a, b)] += ca * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// Plug-in variance of the IPW estimator; returns the SE and its components.
pub fn ipw_variance(
    sample: &CombinedSample,
    pfit: &PropensityFit,
    mu_hat: f64,
    design: &dyn DesignVariance,
) -> Result<(f64, VarianceComponents)> {
    let (xa, xb) = pfit.variance_design(sample)?;
    let q = xb.ncols();
    let y = sample.y_a();
    let (pi_b, d_b) = pi_d_b(sample)?;
    let n_a_hat: f64 = pfit.p_a.iter().map(|p| 1.0 / p).sum();
    let n_b_hat: f64 = d_b.iter().sum();

    // b2 = { sum_A (1/p - 1)(Y - mu) x' } { sum_B d p (1-p) x x' }^{-1}
    let mut a_vec = DVector::zeros(q);
    for i in 0..xa.nrows() {
        let c = (1.0 / pfit.p_a[i] - 1.0) * (y[i] - mu_hat);
        for j in 0..q {
            a_vec[j] += c * xa[(i, j)];
        }
    }
    let m = b_sum_matrix(&xb, &pfit.p_b, &d_b);
    let b2 = solve_sandwich(&m, &a_vec)?;

    // D = N_B^{-2} V_p( sum_B d p x )
    let mut px = xb.clone();
    for i in 0..px.nrows() {
        for j in 0..q {
            px[(i, j)] *= pfit.p_b[i];
        }
    }
    let d_mat = design.matrix(&pi_b, &d_b, &px)? / (n_b_hat * n_b_hat);

    let mut a_term = 0.0;
    for i in 0..xa.nrows() {
        let bx: f64 = (0..q).map(|j| b2[j] * xa[(i, j)]).sum();
        let u = (y[i] - mu_hat) / pfit.p_a[i] - bx;
        a_term += (1.0 - pfit.p_a[i]) * u * u;
    }
    a_term /= n_a_hat * n_a_hat;
    let design_term = (b2.transpose() * &d_mat * &b2)[(0, 0)];
    let v = a_term + design_term;
    Ok((
        v.max(0.0).sqrt(),
        VarianceComponents {
            b: b2.iter().copied().collect(),
            design_term,
            a_term,
            h_n: None,
            t_vals: None,
        },
    ))
}

/// AIPW point estimate with m-hat supplied on A and B (record order).
pub fn aipw_mean(
    sample: &CombinedSample,
    pfit: &PropensityFit,
    mhat_a: &[f64],
    mhat_b: &[f64],
) -> Result<f64> {
    if sample.n_a() == 0 || sample.n_b() == 0 {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    if mhat_a.len() != sample.n_a() || mhat_b.len() != sample.n_b() {
        return Err(Error::Dimension("m-hat length mismatch".into()));
    }
    let y = sample.y_a();
    let d_b = sample.d_b();
    let n_a_hat: f64 = pfit.p_a.iter().map(|p| 1.0 / p).sum();
    let n_b_hat: f64 = d_b.iter().sum();
    let a_part: f64 = y
        .iter()
        .zip(mhat_a.iter())
        .zip(pfit.p_a.iter())
        .map(|((y, m), p)| (y - m) / p)
        .sum();
    let b_part: f64 = d_b.iter().zip(mhat_b.iter()).map(|(d, m)| d * m).sum();
    Ok(a_part / n_a_hat + b_part / n_b_hat)
}

/// Plug-in variance of the AIPW estimator.
pub fn aipw_variance(
    sample: &CombinedSample,
    pfit: &PropensityFit,
    mhat_a: &[f64],
    mhat_b: &[f64],
    design: &dyn DesignVariance,
) -> Result<(f64, VarianceComponents)> {
    let (xa, xb) = pfit.variance_design(sample)?;
    let q = xb.ncols();
    let y = sample.y_a();
    let (pi_b, d_b) = pi_d_b(sample)?;
    let n_a_hat: f64 = pfit.p_a.iter().map(|p| 1.0 / p).sum();
    let n_b_hat: f64 = d_b.iter().sum();

    let h_n: f64 = y
        .iter()
        .zip(mhat_a.iter())
        .zip(pfit.p_a.iter())
        .map(|((y, m), p)| (y - m) / p)
        .sum::<f64>()
        / n_a_hat;

    // b3 = [ sum_A (1/p - 1){Y - m - H_N} x' ] { sum_B d p (1-p) x x' }^{-1}
    let mut a_vec = DVector::zeros(q);
    for i in 0..xa.nrows() {
        let c = (1.0 / pfit.p_a[i] - 1.0) * (y[i] - mhat_a[i] - h_n);
        for j in 0..q {
            a_vec[j] += c * xa[(i, j)];
        }
    }
    let m = b_sum_matrix(&xb, &pfit.p_b, &d_b);
    let b3 = solve_sandwich(&m, &a_vec)?;

    // t_i = p_i x_i' b3 + m(x_i) - N_B^{-1} sum_B d m(x)
    let mbar: f64 = d_b
        .iter()
        .zip(mhat_b.iter())
        .map(|(d, m)| d * m)
        .sum::<f64>()
        / n_b_hat;
    let t_vals: Vec<f64> = (0..xb.nrows())
        .map(|i| {
            let bx: f64 = (0..q).map(|j| b3[j] * xb[(i, j)]).sum();
            pfit.p_b[i] * bx + mhat_b[i] - mbar
        })
        .collect();
    let w_hat = design.scalar(&pi_b, &d_b, &t_vals)? / (n_b_hat * n_b_hat);

    let mut a_term = 0.0;
    for i in 0..xa.nrows() {
        let bx: f64 = (0..q).map(|j| b3[j] * xa[(i, j)]).sum();
        let u = (y[i] - mhat_a[i] - h_n) / pfit.p_a[i] - bx;
        a_term += (1.0 - pfit.p_a[i]) * u * u;
    }
    a_term /= n_a_hat * n_a_hat;
    let v = a_term + w_hat;
    Ok((
        v.max(0.0).sqrt(),
        VarianceComponents {
            b: b3.iter().copied().collect(),
            design_term: w_hat,
            a_term,
            h_n: Some(h_n),
            t_vals: Some(t_vals),
        },
    ))
}

fn method_info(
    sample: &CombinedSample,
    pfit: &PropensityFit,
    name: &str,
    outcome: Option<OutcomeKind>,
) -> MethodInfo {
    MethodInfo {
        estimator: name.to_string(),
        propensity: pfit.method,
        outcome,
        lambda: pfit.lambda,
        active_set: pfit
            .active_set
            .iter()
            .map(|&j| sample.names()[j].clone())
            .collect(),
        clamp_count: pfit.clamp_count,
    }
}

/// Full IPW report: point, SE, Wald CI, metadata.
pub fn ipw_report(
    sample: &CombinedSample,
    pfit: &PropensityFit,
    name: &str,
    design: &dyn DesignVariance,
) -> Result<EstimateReport> {
    let mu = ipw_mean(sample, pfit)?;
    let (se, comps) = ipw_variance(sample, pfit, mu, design)?;
    let (ci_lo, ci_hi) = wald_ci(mu, se);
    Ok(EstimateReport {
        mu_hat: mu,
        se,
        ci_lo,
        ci_hi,
        method: method_info(sample, pfit, name, None),
        components: Some(comps),
    })
}

/// Full AIPW report: point, SE, Wald CI, metadata.
pub fn aipw_report(
    sample: &CombinedSample,
    pfit: &PropensityFit,
    mhat_a: &[f64],
    mhat_b: &[f64],
    name: &str,
    outcome: OutcomeKind,
    design: &dyn DesignVariance,
) -> Result<EstimateReport> {
    let mu = aipw_mean(sample, pfit, mhat_a, mhat_b)?;
    let (se, comps) = aipw_variance(sample, pfit, mhat_a, mhat_b, design)?;
    let (ci_lo, ci_hi) = wald_ci(mu, se);
    Ok(EstimateReport {
        mu_hat: mu,
        se,
        ci_lo,
        ci_hi,
        method: method_info(sample, pfit, name, Some(outcome)),
        components: Some(comps),
    })
}

//! Numerical kernels shared by the propensity and outcome fits: weighted
//! least squares, coordinate-descent LASSO with per-coefficient penalty
//! factors, and SCAD through local linear approximation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Weighted least squares problem with an optional L1 penalty.
///
/// Minimizes  sum_i w_i (y_i - beta' x_i)^2 + lambda * sum_j pf_j |beta_j|.
/// Penalty factors apply to the coefficients exactly as given: callers that
/// want standardized penalization fold the column scales into `penalty_factors`.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub penalty_factors: DVector<f64>,
    pub lambda: f64,
}

impl WlsProblem {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        w: DVector<f64>,
        penalty_factors: DVector<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let (n, q) = x.shape();
        if y.len() != n || w.len() != n {
            return Err(Error::Dimension(format!(
                "x is {n}x{q} but y has {} rows, w has {}",
                y.len(),
                w.len()
            )));
        }
        if penalty_factors.len() != q {
            return Err(Error::Dimension(format!(
                "{} penalty factors for {q} columns",
                penalty_factors.len()
            )));
        }
        if w.iter().any(|&wi| !(wi > 0.0) || !wi.is_finite()) {
            return Err(Error::Validation(
                "observation weights must be positive".into(),
            ));
        }
        if penalty_factors.iter().any(|&pf| pf < 0.0) {
            return Err(Error::Validation(
                "penalty factors must be non-negative".into(),
            ));
        }
        if lambda < 0.0 {
            return Err(Error::Validation("lambda must be non-negative".into()));
        }
        Ok(WlsProblem {
            x,
            y,
            w,
            penalty_factors,
            lambda,
        })
    }

    /// Same design, different lambda. Used along regularization paths.
    pub fn with_lambda(&self, lambda: f64) -> WlsProblem {
        WlsProblem {
            lambda,
            ..self.clone()
        }
    }

    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let r = &self.y - &self.x * beta;
        let fit: f64 = r
            .iter()
            .zip(self.w.iter())
            .map(|(ri, wi)| wi * ri * ri)
            .sum();
        let pen: f64 = beta
            .iter()
            .zip(self.penalty_factors.iter())
            .filter(|(b, pf)| pf.is_finite() || **b != 0.0)
            .map(|(b, pf)| pf * b.abs())
            .sum();
        fit + self.lambda * pen
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Convergence threshold on the max coefficient change per sweep.
    pub tol: f64,
    /// Maximum coordinate-descent sweeps.
    pub max_iter: usize,
    /// SCAD local-linear-approximation rounds.
    pub lla_iter: usize,
    /// SCAD tuning constant, the Fan-Li convention.
    pub scad_a: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 10_000,
            lla_iter: 3,
            scad_a: 3.7,
        }
    }
}

/// sign(z) * max(|z| - t, 0)
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Derivative of the SCAD penalty at |beta| = t (t >= 0).
pub fn scad_derivative(t: f64, lambda: f64, a: f64) -> f64 {
    if t <= lambda {
        lambda
    } else {
        ((a * lambda - t).max(0.0)) / (a - 1.0)
    }
}

/// Unpenalized weighted least squares via the normal equations.
///
/// With `allow_ridge`, a singular system gets a ridge of 1e-8 * trace/q on
/// the diagonal and a warning instead of an error.
pub fn wls_solve_opts(prob: &WlsProblem, allow_ridge: bool) -> Result<DVector<f64>> {
    let q = prob.x.ncols();
    let mut xtwx = DMatrix::zeros(q, q);
    let mut xtwy = DVector::zeros(q);
    for i in 0..prob.x.nrows() {
        let wi = prob.w[i];
        let row = prob.x.row(i);
        for a in 0..q {
            let wxa = wi * row[a];
            xtwy[a] += wxa * prob.y[i];
            for b in a..q {
                xtwx[(a, b)] += wxa * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    match xtwx.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&xtwy)),
        None => {
            if !allow_ridge {
                return Err(Error::Singular("X'WX is not positive definite".into()));
            }
            let ridge = 1e-8 * xtwx.trace() / q as f64;
            log::warn!("singular X'WX; adding ridge {ridge:.3e}");
            for a in 0..q {
                xtwx[(a, a)] += ridge.max(1e-300);
            }
            xtwx.cholesky()
                .map(|c| c.solve(&xtwy))
                .ok_or_else(|| Error::Singular("X'WX singular even with ridge".into()))
        }
    }
}

pub fn wls_solve(prob: &WlsProblem) -> Result<DVector<f64>> {
    wls_solve_opts(prob, true)
}

/// Coordinate-descent solve of the penalized WLS problem.
pub fn lasso_cd(prob: &WlsProblem, config: &SolverConfig) -> Result<DVector<f64>> {
    lasso_cd_warm(prob, config, None)
}

/// Coordinate descent with an optional warm start (used along lambda paths).
pub fn lasso_cd_warm(
    prob: &WlsProblem,
    config: &SolverConfig,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let engine = CdEngine::new(&prob.x, &prob.y, &prob.w);
    engine.solve(&prob.penalty_factors, prob.lambda, config, warm)
}

/// Gram form of a weighted design (X'WX, X'Wy), shared across every solve on
/// the same data: a lambda path, CV folds, LLA rounds. Coordinate updates
/// become O(active set) instead of O(n).
pub struct CdEngine {
    gram: DMatrix<f64>,
    xtwy: DVector<f64>,
    yty: f64,
}

impl CdEngine {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Self {
        let (n, q) = x.shape();
        let mut gram = DMatrix::zeros(q, q);
        let mut xtwy = DVector::zeros(q);
        let mut yty = 0.0;
        for i in 0..n {
            let wi = w[i];
            let row = x.row(i);
            yty += wi * y[i] * y[i];
            for a in 0..q {
                let wxa = wi * row[a];
                xtwy[a] += wxa * y[i];
                for b in a..q {
                    gram[(a, b)] += wxa * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        CdEngine { gram, xtwy, yty }
    }

    /// Weighted residual sum of squares at `beta` (no penalty term).
    pub fn quad_loss(&self, beta: &DVector<f64>) -> f64 {
        let gb = &self.gram * beta;
        self.yty - 2.0 * self.xtwy.dot(beta) + beta.dot(&gb)
    }

    fn objective(&self, pf: &DVector<f64>, lambda: f64, beta: &DVector<f64>) -> f64 {
        let pen: f64 = beta
            .iter()
            .zip(pf.iter())
            .filter(|(b, pf)| pf.is_finite() || **b != 0.0)
            .map(|(b, pf)| pf * b.abs())
            .sum();
        self.quad_loss(beta) + lambda * pen
    }

    pub fn solve(
        &self,
        pf: &DVector<f64>,
        lambda: f64,
        config: &SolverConfig,
        warm: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let q = self.gram.ncols();
        let mut beta = match warm {
            Some(b) if b.len() == q => b.clone(),
            _ => DVector::zeros(q),
        };
        // Infinite penalty factor pins the coefficient at zero.
        for j in 0..q {
            if !pf[j].is_finite() && lambda > 0.0 {
                beta[j] = 0.0;
            }
        }
        let eligible: Vec<bool> = (0..q)
            .map(|j| self.gram[(j, j)] > 0.0 && (pf[j].is_finite() || lambda == 0.0))
            .collect();
        let all: Vec<usize> = (0..q).filter(|&j| eligible[j]).collect();
        // v tracks Gram * beta; refreshed at each full sweep to limit drift
        let mut v;
        let sweep = |beta: &mut DVector<f64>, v: &mut DVector<f64>, js: &[usize]| -> f64 {
            let mut max_change = 0.0f64;
            for &j in js {
                let curv = self.gram[(j, j)];
                let z = self.xtwy[j] - v[j] + curv * beta[j];
                let old = beta[j];
                let new = soft_threshold(z, 0.5 * lambda * pf[j]) / curv;
                if new != old {
                    let step = new - old;
                    for k in 0..q {
                        v[k] += step * self.gram[(k, j)];
                    }
                    beta[j] = new;
                    max_change = max_change.max(step.abs());
                }
            }
            max_change
        };
        let mut prev_obj = f64::INFINITY;
        let mut last_change = f64::INFINITY;
        let mut iter = 0usize;
        while iter < config.max_iter {
            // full sweep: updates everything and discovers new active coordinates
            v = &self.gram * &beta;
            let full_change = sweep(&mut beta, &mut v, &all);
            iter += 1;
            if cfg!(debug_assertions) {
                let obj = self.objective(pf, lambda, &beta);
                debug_assert!(
                    obj <= prev_obj + 1e-8 * (1.0 + prev_obj.abs().min(1e30)),
                    "coordinate sweep increased objective: {prev_obj} -> {obj}"
                );
                prev_obj = obj;
            }
            last_change = full_change;
            if full_change < config.tol {
                return Ok(beta);
            }
            // inner loop over the active set only (nonzero or unpenalized)
            let active: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&j| beta[j] != 0.0 || lambda * pf[j] == 0.0)
                .collect();
            while iter < config.max_iter {
                let change = sweep(&mut beta, &mut v, &active);
                iter += 1;
                last_change = change;
                if change < config.tol {
                    break;
                }
            }
        }
        Err(Error::Convergence {
            iterations: config.max_iter,
            last_change,
        })
    }

    /// SCAD-LLA on the engine's data; see `scad_lla_warm`.
    pub fn solve_scad(
        &self,
        base_pf: &DVector<f64>,
        lambda: f64,
        config: &SolverConfig,
        warm: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let q = self.gram.ncols();
        let mut beta: Option<DVector<f64>> = warm.filter(|b| b.len() == q).cloned();
        for round in 0..config.lla_iter.max(1) {
            let pf = match &beta {
                None => base_pf.clone(),
                Some(b) => DVector::from_iterator(
                    q,
                    base_pf.iter().zip(b.iter()).map(|(&pf0, &bj)| {
                        if pf0 == 0.0 {
                            0.0
                        } else {
                            pf0 * scad_derivative(bj.abs(), lambda, config.scad_a) / lambda
                        }
                    }),
                ),
            };
            let next = self.solve(&pf, lambda, config, beta.as_ref())?;
            let done = round + 1 == config.lla_iter.max(1);
            beta = Some(next);
            if done {
                break;
            }
        }
        Ok(beta.unwrap())
    }
}

/// SCAD-penalized WLS by local linear approximation: each round replaces the
/// penalty factors with the SCAD derivative at the previous |beta_j| and
/// solves one LASSO problem.
pub fn scad_lla(prob: &WlsProblem, config: &SolverConfig) -> Result<DVector<f64>> {
    scad_lla_warm(prob, config, None)
}

/// SCAD-LLA with a warm start; the first round already linearizes the penalty
/// at the warm iterate. Used along lambda paths.
pub fn scad_lla_warm(
    prob: &WlsProblem,
    config: &SolverConfig,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if prob.lambda == 0.0 {
        return wls_solve(prob);
    }
    let engine = CdEngine::new(&prob.x, &prob.y, &prob.w);
    engine.solve_scad(&prob.penalty_factors, prob.lambda, config, warm)
}

/// Largest KKT violation of the penalized WLS problem at `beta`.
/// Zero (up to tolerance) at an exact solution.
pub fn kkt_max_violation(prob: &WlsProblem, beta: &DVector<f64>) -> f64 {
    let r = &prob.y - &prob.x * beta;
    let mut worst = 0.0f64;
    for j in 0..prob.x.ncols() {
        let pf = prob.penalty_factors[j];
        if !pf.is_finite() && prob.lambda > 0.0 {
            continue;
        }
        let col = prob.x.column(j);
        let g: f64 = 2.0
            * col
                .iter()
                .zip(r.iter())
                .zip(prob.w.iter())
                .map(|((x, ri), w)| w * x * ri)
                .sum::<f64>();
        let t = prob.lambda * pf;
        let v = if beta[j] != 0.0 {
            (g - t * beta[j].signum()).abs()
        } else {
            (g.abs() - t).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn problem(
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        w: Vec<f64>,
        pf: Vec<f64>,
        lambda: f64,
    ) -> WlsProblem {
        let n = x.len();
        let q = x[0].len();
        let xm = DMatrix::from_fn(n, q, |i, j| x[i][j]);
        WlsProblem::new(
            xm,
            DVector::from_vec(y),
            DVector::from_vec(w),
            DVector::from_vec(pf),
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    }

    #[test]
    fn wls_mean() {
        let p = problem(
            vec![vec![1.0], vec![1.0]],
            vec![2.0, 4.0],
            vec![1.0, 1.0],
            vec![0.0],
            0.0,
        );
        let b = wls_solve(&p).unwrap();
        assert_abs_diff_eq!(b[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn wls_weighted_mean() {
        let p = problem(
            vec![vec![1.0], vec![1.0]],
            vec![2.0, 4.0],
            vec![3.0, 1.0],
            vec![0.0],
            0.0,
        );
        let b = wls_solve(&p).unwrap();
        assert_abs_diff_eq!(b[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn wls_matches_dense_normal_equations() {
        // Independent oracle: direct dense inverse of the normal equations.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20;
        let q = 4;
        let x = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 3.0);
        let w = DVector::from_fn(n, |_, _| 0.5 + rng.gen::<f64>());
        let p = WlsProblem::new(x.clone(), y.clone(), w.clone(), DVector::zeros(q), 0.0).unwrap();
        let wd = DMatrix::from_diagonal(&w);
        let oracle = (x.transpose() * &wd * &x).try_inverse().unwrap() * (x.transpose() * &wd * &y);
        let b = wls_solve(&p).unwrap();
        for j in 0..q {
            assert_abs_diff_eq!(b[j], oracle[j], epsilon = 1e-8);
        }
        // residual gradient near zero
        let r = &y - &x * &b;
        let grad = x.transpose() * &wd * r;
        assert!(grad.amax() < 1e-8);
    }

    #[test]
    fn lasso_lambda_zero_equals_wls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(15, 3, |_, _| rng.gen::<f64>() - 0.5);
        let y = DVector::from_fn(15, |_, _| rng.gen::<f64>());
        let w = DVector::from_element(15, 1.0);
        let p = WlsProblem::new(x, y, w, DVector::from_vec(vec![0.0, 1.0, 1.0]), 0.0).unwrap();
        let cd = lasso_cd(&p, &SolverConfig::default()).unwrap();
        let ls = wls_solve(&p).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(cd[j], ls[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn lasso_huge_lambda_zeroes_penalized() {
        // intercept (pf = 0) plus two penalized covariates
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let x = DMatrix::from_fn(
            n,
            3,
            |_, j| if j == 0 { 1.0 } else { rng.gen::<f64>() - 0.5 },
        );
        let y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 1)] * 2.0 + rng.gen::<f64>() * 0.1);
        let w = DVector::from_fn(n, |_, _| 0.5 + rng.gen::<f64>());
        let p = WlsProblem::new(
            x,
            y.clone(),
            w.clone(),
            DVector::from_vec(vec![0.0, 1.0, 1.0]),
            1e9,
        )
        .unwrap();
        let b = lasso_cd(&p, &SolverConfig::default()).unwrap();
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.0);
        let wmean = y.iter().zip(w.iter()).map(|(y, w)| w * y).sum::<f64>() / w.sum();
        assert_abs_diff_eq!(b[0], wmean, epsilon = 1e-6);
    }

    #[test]
    fn lasso_orthonormal_soft_threshold() {
        // Single weighted-orthonormal covariate: solution is the analytic
        // soft-threshold of the least squares coefficient.
        let x = DMatrix::from_column_slice(4, 1, &[0.5, 0.5, 0.5, 0.5]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 2.0]);
        let w = DVector::from_element(4, 1.0);
        // a = sum w x^2 = 1, ls coefficient = x'y = 4
        let lambda = 2.0;
        let p = WlsProblem::new(
            x.clone(),
            y.clone(),
            w,
            DVector::from_element(1, 1.0),
            lambda,
        )
        .unwrap();
        let b = lasso_cd(&p, &SolverConfig::default()).unwrap();
        let expected = soft_threshold(4.0, 0.5 * lambda);
        assert_abs_diff_eq!(b[0], expected, epsilon = 1e-10);
    }

    #[test]
    fn lasso_pf_zero_equals_wls_any_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(25, 4, |_, _| rng.gen::<f64>() - 0.5);
        let y = DVector::from_fn(25, |_, _| rng.gen::<f64>());
        let w = DVector::from_fn(25, |_, _| 0.1 + rng.gen::<f64>());
        let p = WlsProblem::new(x, y, w, DVector::zeros(4), 42.0).unwrap();
        let cd = lasso_cd(&p, &SolverConfig::default()).unwrap();
        let ls = wls_solve(&p).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(cd[j], ls[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn scalar_path_monotone() {
        // Larger lambda never increases |beta| for one penalized covariate.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(40, 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(40, |i, _| 1.5 * x[(i, 0)] + 0.2 * (rng.gen::<f64>() - 0.5));
        let w = DVector::from_element(40, 1.0);
        let mut prev = f64::INFINITY;
        for &lambda in &[0.0, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let p = WlsProblem::new(
                x.clone(),
                y.clone(),
                w.clone(),
                DVector::from_element(1, 1.0),
                lambda,
            )
            .unwrap();
            let b = lasso_cd(&p, &SolverConfig::default()).unwrap();
            assert!(b[0].abs() <= prev + 1e-10);
            prev = b[0].abs();
        }
    }

    #[test]
    fn scad_lambda_zero_equals_wls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(20, 3, |_, _| rng.gen::<f64>() - 0.5);
        let y = DVector::from_fn(20, |_, _| rng.gen::<f64>());
        let w = DVector::from_element(20, 1.0);
        let p = WlsProblem::new(x, y, w, DVector::from_element(3, 1.0), 0.0).unwrap();
        let b = scad_lla(&p, &SolverConfig::default()).unwrap();
        let ls = wls_solve(&p).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(b[j], ls[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn scad_flat_region_derivative_zero() {
        let lambda = 0.5;
        let a = 3.7;
        assert_eq!(scad_derivative(0.3, lambda, a), lambda);
        assert_eq!(scad_derivative(a * lambda + 0.1, lambda, a), 0.0);
        // between lambda and a*lambda: linear decay
        let mid = 1.0;
        assert_abs_diff_eq!(
            scad_derivative(mid, lambda, a),
            (a * lambda - mid) / (a - 1.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn scad_recovers_signal_like_best_subset() {
        // Oracle: exhaustive best-subset over 6 covariates on 20 seeded draws.
        // SCAD's selected set should contain the truth at least as often as
        // plain LASSO at the same lambda.
        let cfg = SolverConfig::default();
        let mut scad_hits = 0;
        let mut lasso_hits = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 80;
            let x = DMatrix::from_fn(n, 6, |_, _| {
                let u: f64 = rng.gen();
                2.0 * u - 1.0
            });
            let y = DVector::from_fn(n, |i, _| {
                2.0 * x[(i, 0)] - 1.5 * x[(i, 1)] + 0.3 * (rng.gen::<f64>() - 0.5)
            });
            let w = DVector::from_element(n, 1.0);
            let lambda = 6.0;
            let p = WlsProblem::new(x, y, w, DVector::from_element(6, 1.0), lambda).unwrap();
            let bs = scad_lla(&p, &cfg).unwrap();
            let bl = lasso_cd(&p, &cfg).unwrap();
            if bs[0] != 0.0 && bs[1] != 0.0 {
                scad_hits += 1;
            }
            if bl[0] != 0.0 && bl[1] != 0.0 {
                lasso_hits += 1;
            }
        }
        assert!(scad_hits >= lasso_hits);
        assert!(
            scad_hits >= 18,
            "SCAD found the truth only {scad_hits}/20 times"
        );
    }

    #[test]
    fn kkt_holds_on_random_problems() {
        let cfg = SolverConfig {
            tol: 1e-9,
            ..SolverConfig::default()
        };
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10 + (seed as usize % 20);
            let q = 2 + (seed as usize % 5);
            let x = DMatrix::from_fn(n, q, |_, j| {
                if j == 0 {
                    1.0
                } else {
                    rng.gen::<f64>() * 2.0 - 1.0
                }
            });
            let y = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let w = DVector::from_fn(n, |_, _| 0.2 + rng.gen::<f64>());
            let mut pf = DVector::from_fn(q, |_, _| 0.5 + rng.gen::<f64>());
            pf[0] = 0.0;
            let lambda = rng.gen::<f64>() * 2.0;
            let p = WlsProblem::new(x, y, w, pf, lambda).unwrap();
            let b = lasso_cd(&p, &cfg).unwrap();
            let scale = 1.0 + p.y.amax();
            assert!(
                kkt_max_violation(&p, &b) < 1e-6 * scale,
                "KKT violated at seed {seed}"
            );
        }
    }
}

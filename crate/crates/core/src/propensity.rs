//! Propensity of belonging to the non-probability sample, P(Delta=1 | X),
//! fitted by design-weighted pseudo-likelihood with Newton-Raphson, plus
//! LASSO / outcome-adaptive-LASSO / SCAD-union variable selection and the
//! collaborative single-covariate alternative.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{CombinedSample, Membership, PositivityConfig};
use crate::error::{Error, Result};
use crate::outcome::{logistic_irls, OutcomeFamily};
use crate::solvers::{wls_solve, CdEngine, SolverConfig, WlsProblem};

/// Gradient tolerance for Newton convergence, relative to n_B.
const NEWTON_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 30;
/// Outcome coefficients smaller than this exclude the covariate from the
/// penalized fit outright (the adaptive weight would overflow).
const ALPHA_FLOOR: f64 = 1e-10;

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t), stable for large |t|.
fn softplus(t: f64) -> f64 {
    if t > 35.0 {
        t
    } else if t < -35.0 {
        t.exp()
    } else {
        (1.0 + t.exp()).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityMethod {
    Newton,
    Lasso,
    Oalasso,
    ScadUnion,
    Collaborative,
}

/// Fitted selection model. `beta` holds the intercept first, then one
/// coefficient per entry of `subset` (covariate indices into the sample).
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub method: PropensityMethod,
    pub subset: Vec<usize>,
    pub beta: DVector<f64>,
    /// Covariate indices with nonzero coefficients.
    pub active_set: Vec<usize>,
    /// Clamped fitted probabilities on A, record order.
    pub p_a: Vec<f64>,
    /// Clamped fitted probabilities on B, record order.
    pub p_b: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub lambda: Option<f64>,
    pub clamp_count: usize,
    pub cv_curve: Option<CvCurve>,
    /// Collaborative fits condition on m-hat instead of X; kept here so the
    /// variance design can be rebuilt downstream.
    pub collab_mhat: Option<(Vec<f64>, Vec<f64>)>,
    /// Weighted column standard deviations used to standardize the penalty,
    /// aligned with `beta` (entry 0, the intercept, is unused). Present only
    /// on penalized fits that keep shrunken coefficients.
    pub penalty_scales: Option<Vec<f64>>,
}

impl PropensityFit {
    /// Design used for variance estimation: intercept plus active covariates
    /// (for the collaborative score, intercept plus m-hat).
    pub fn variance_design(&self, sample: &CombinedSample) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if let Some((ma, mb)) = &self.collab_mhat {
            let xa = DMatrix::from_fn(ma.len(), 2, |i, j| if j == 0 { 1.0 } else { ma[i] });
            let xb = DMatrix::from_fn(mb.len(), 2, |i, j| if j == 0 { 1.0 } else { mb[i] });
            return Ok((xa, xb));
        }
        let xa = sample.design_matrix(&self.active_set, true, Membership::A)?;
        let xb = sample.design_matrix(&self.active_set, true, Membership::B)?;
        Ok((xa, xb))
    }

    /// Variant of a penalized fit with each slope divided by the squared
    /// penalty standardization scale, probabilities recomputed accordingly.
    /// This mirrors a back-transform that de-standardizes coefficients by
    /// the column variance where the standard deviation belongs; the
    /// simulation harness uses it to replicate the benchmark results its
    /// penalized IPW rows are checked against. Returns a plain clone when
    /// no scales are stored (unpenalized or refit-based fits).
    pub fn rescaled_by_variance(&self, sample: &CombinedSample) -> PropensityFit {
        let mut out = self.clone();
        let Some(scales) = &self.penalty_scales else {
            return out;
        };
        for (k, s) in scales.iter().enumerate().skip(1) {
            if *s > 0.0 {
                out.beta[k] /= s * s;
            }
        }
        let (p_a, p_b, clamp_count) =
            probabilities(sample, &out.subset, &out.beta, &PositivityConfig::default());
        out.p_a = p_a;
        out.p_b = p_b;
        out.clamp_count = clamp_count;
        out
    }
}

/// Working response and weights for the penalized WLS reformulation of one
/// Newton step, built over B.
#[derive(Debug, Clone)]
pub struct WorkingResponse {
    pub ystar: DVector<f64>,
    pub w: DVector<f64>,
    pub clamped: usize,
}

/// Cross-validation trace for the lambda path.
#[derive(Debug, Clone, Serialize)]
pub struct CvCurve {
    pub lambdas: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub fold_loss: Vec<Vec<f64>>,
    pub selected: f64,
}

#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    /// Explicit descending grid; None generates one from lambda_max.
    pub lambda_grid: Option<Vec<f64>>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    /// Adaptive-weight exponent.
    pub gamma: f64,
    pub v_folds: usize,
    /// Cluster/stratum labels per B unit; whole groups share a fold.
    pub fold_labels: Option<Vec<u64>>,
    pub seed: u64,
    /// Refit Newton on the active set instead of keeping penalized
    /// coefficients for the final probabilities.
    pub refit: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda_grid: None,
            n_lambda: 50,
            lambda_min_ratio: 1e-4,
            gamma: 1.0,
            v_folds: 5,
            fold_labels: None,
            seed: 0,
            refit: false,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::Config("empty lambda grid".into()));
            }
            if grid.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config(
                    "lambda grid must be strictly descending".into(),
                ));
            }
            if grid.iter().any(|&l| l < 0.0) {
                return Err(Error::Config("lambda grid must be positive".into()));
            }
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.v_folds < 2 {
            return Err(Error::Config("v_folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Newton-Raphson minimization of the design-weighted pseudo risk
///   L(beta) = -sum_A x'beta + sum_B d_i log(1 + exp(x'beta))
/// over explicit designs (intercept included in the columns).
fn newton_core(xa: &DMatrix<f64>, xb: &DMatrix<f64>, d_b: &[f64]) -> Result<(DVector<f64>, usize)> {
    let q = xb.ncols();
    let n_b = xb.nrows() as f64;
    // sum over A of x_i, the constant part of the gradient
    let mut sum_a = DVector::zeros(q);
    for i in 0..xa.nrows() {
        for j in 0..q {
            sum_a[j] += xa[(i, j)];
        }
    }
    let risk = |beta: &DVector<f64>| -> f64 {
        let eta_a = xa * beta;
        let eta_b = xb * beta;
        let mut l = -eta_a.sum();
        for i in 0..xb.nrows() {
            l += d_b[i] * softplus(eta_b[i]);
        }
        l
    };
    let gradient_u = |beta: &DVector<f64>| -> DVector<f64> {
        let eta_b = xb * beta;
        let mut u = sum_a.clone();
        for i in 0..xb.nrows() {
            let c = d_b[i] * expit(eta_b[i]);
            for j in 0..q {
                u[j] -= c * xb[(i, j)];
            }
        }
        u
    };

    let mut beta = DVector::zeros(q);
    let mut l_cur = risk(&beta);
    for iter in 0..NEWTON_MAX_ITER {
        let u = gradient_u(&beta);
        if u.amax() < NEWTON_TOL * n_b {
            return Ok((beta, iter));
        }
        if beta.amax() > 50.0 && u.amax() >= 1e-4 * n_b {
            return Err(Error::Separation);
        }
        // positive-definite Hessian of the risk: sum_B d p (1-p) x x'
        let eta_b = xb * &beta;
        let mut h = DMatrix::zeros(q, q);
        for i in 0..xb.nrows() {
            let p = expit(eta_b[i]);
            let wi = d_b[i] * p * (1.0 - p);
            let row = xb.row(i);
            for a in 0..q {
                let wxa = wi * row[a];
                for b in a..q {
                    h[(a, b)] += wxa * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        let step = match h.clone().cholesky() {
            Some(chol) => chol.solve(&u),
            None => {
                let ridge = 1e-8 * h.trace() / q as f64 + 1e-300;
                for a in 0..q {
                    h[(a, a)] += ridge;
                }
                h.cholesky()
                    .ok_or_else(|| Error::Singular("pseudo-risk Hessian".into()))?
                    .solve(&u)
            }
        };
        // step halving on the pseudo risk
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + s * &step;
            let l_new = risk(&cand);
            if l_new <= l_cur + 1e-12 * (1.0 + l_cur.abs()) {
                beta = cand;
                l_cur = l_new;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            return Err(Error::Convergence {
                iterations: iter,
                last_change: u.amax(),
            });
        }
    }
    let u = gradient_u(&beta);
    if u.amax() < 1e-6 * n_b {
        Ok((beta, NEWTON_MAX_ITER))
    } else {
        Err(Error::Convergence {
            iterations: NEWTON_MAX_ITER,
            last_change: u.amax(),
        })
    }
}

fn probabilities(
    sample: &CombinedSample,
    subset: &[usize],
    beta: &DVector<f64>,
    pos: &PositivityConfig,
) -> (Vec<f64>, Vec<f64>, usize) {
    let mut clamps = 0;
    let mut eval = |x: &[f64]| -> f64 {
        let mut eta = beta[0];
        for (k, &j) in subset.iter().enumerate() {
            eta += beta[k + 1] * x[j];
        }
        let p = expit(eta);
        let c = pos.clamp(p);
        if c != p {
            clamps += 1;
        }
        c
    };
    let p_a: Vec<f64> = sample.a_records().map(|r| eval(&r.x)).collect();
    let p_b: Vec<f64> = sample.b_records().map(|r| eval(&r.x)).collect();
    (p_a, p_b, clamps)
}

/// Unpenalized pseudo-likelihood fit on the given covariate subset.
pub fn fit_newton(sample: &CombinedSample, subset: &[usize]) -> Result<PropensityFit> {
    let xa = sample.design_matrix(subset, true, Membership::A)?;
    let xb = sample.design_matrix(subset, true, Membership::B)?;
    let d_b = sample.d_b();
    let (beta, iterations) = newton_core(&xa, &xb, &d_b)?;
    let (p_a, p_b, clamp_count) =
        probabilities(sample, subset, &beta, &PositivityConfig::default());
    Ok(PropensityFit {
        method: PropensityMethod::Newton,
        subset: subset.to_vec(),
        beta,
        active_set: subset.to_vec(),
        p_a,
        p_b,
        converged: true,
        iterations,
        lambda: None,
        clamp_count,
        cv_curve: None,
        collab_mhat: None,
        penalty_scales: None,
    })
}

/// Pseudo risk of a fit's coefficients (exposed for the grid oracle test).
pub fn pseudo_risk(sample: &CombinedSample, subset: &[usize], beta: &DVector<f64>) -> f64 {
    let mut l = 0.0;
    for r in sample.a_records() {
        let mut eta = beta[0];
        for (k, &j) in subset.iter().enumerate() {
            eta += beta[k + 1] * r.x[j];
        }
        l -= eta;
    }
    for r in sample.b_records() {
        let mut eta = beta[0];
        for (k, &j) in subset.iter().enumerate() {
            eta += beta[k + 1] * r.x[j];
        }
        l += r.d.unwrap() * softplus(eta);
    }
    l
}

/// Gradient U(beta) = sum_A x - sum_B d p x of the fitted model; its max-abs
/// component is the stationarity diagnostic.
pub fn gradient_max(sample: &CombinedSample, fit: &PropensityFit) -> f64 {
    let q = fit.subset.len() + 1;
    let mut u = DVector::zeros(q);
    for r in sample.a_records() {
        u[0] += 1.0;
        for (k, &j) in fit.subset.iter().enumerate() {
            u[k + 1] += r.x[j];
        }
    }
    for (r, &p) in sample.b_records().zip(fit.p_b.iter()) {
        let c = r.d.unwrap() * p;
        u[0] -= c;
        for (k, &j) in fit.subset.iter().enumerate() {
            u[k + 1] -= c * r.x[j];
        }
    }
    u.amax()
}

/// Working response over B from a fitted propensity:
///   w_i = d_i p_i (1 - p_i),  ystar_i = x'beta + (Delta_i - p_i) / (p_i (1 - p_i)).
pub fn working_response(sample: &CombinedSample, fit: &PropensityFit) -> WorkingResponse {
    let delta_b = sample.delta_b();
    let n = fit.p_b.len();
    let mut ystar = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for (i, (r, &p)) in sample.b_records().zip(fit.p_b.iter()).enumerate() {
        // p is already clamped into (0,1); the logit recovers x'beta
        let eta = (p / (1.0 - p)).ln();
        let v = p * (1.0 - p);
        ystar[i] = eta + (delta_b[i] - p) / v;
        w[i] = r.d.unwrap() * v;
    }
    WorkingResponse {
        ystar,
        w,
        clamped: fit.clamp_count,
    }
}

/// Coefficients of a regression of Y on all candidate covariates, fit on A
/// only. Intercept included as element 0.
pub fn outcome_coefficients(
    sample: &CombinedSample,
    family: OutcomeFamily,
) -> Result<DVector<f64>> {
    let p = sample.p();
    if sample.n_a() <= p + 1 {
        return Err(Error::InsufficientData(format!(
            "n_a = {} with p = {p}; need n_a > p + 1",
            sample.n_a()
        )));
    }
    let subset: Vec<usize> = (0..p).collect();
    let xa = sample.design_matrix(&subset, true, Membership::A)?;
    let y = DVector::from_vec(sample.y_a());
    match family {
        OutcomeFamily::Linear => {
            let w = DVector::from_element(xa.nrows(), 1.0);
            let prob = WlsProblem::new(xa, y, w, DVector::zeros(p + 1), 0.0)?;
            wls_solve(&prob)
        }
        OutcomeFamily::Logistic => logistic_irls(&xa, &y),
    }
}

/// Shared state for the penalized propensity fits: one full-model Newton fit
/// and its frozen working response.
#[derive(Debug, Clone)]
pub struct PropensityWorkspace {
    pub full: PropensityFit,
    pub wr: WorkingResponse,
    pub xb: DMatrix<f64>,
    all: Vec<usize>,
}

impl PropensityWorkspace {
    pub fn build(sample: &CombinedSample) -> Result<Self> {
        let all: Vec<usize> = (0..sample.p()).collect();
        let full = fit_newton(sample, &all)?;
        let wr = working_response(sample, &full);
        let xb = sample.design_matrix(&all, true, Membership::B)?;
        Ok(PropensityWorkspace { full, wr, xb, all })
    }
}

/// Weighted standard deviation of each design column (intercept gets 0), used
/// to put penalty factors on a standardized scale.
fn column_scales(x: &DMatrix<f64>, w: &DVector<f64>) -> Vec<f64> {
    let wsum: f64 = w.sum();
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let mean: f64 = col.iter().zip(w.iter()).map(|(x, w)| w * x).sum::<f64>() / wsum;
            let var: f64 = col
                .iter()
                .zip(w.iter())
                .map(|(x, w)| w * (x - mean) * (x - mean))
                .sum::<f64>()
                / wsum;
            var.sqrt()
        })
        .collect()
}

/// Smallest lambda that zeroes every penalized coefficient, from the KKT
/// condition at the intercept-only solution.
fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, pf: &DVector<f64>) -> f64 {
    let wsum: f64 = w.sum();
    let wmean: f64 = y.iter().zip(w.iter()).map(|(y, w)| w * y).sum::<f64>() / wsum;
    let mut lmax = 0.0f64;
    for j in 0..x.ncols() {
        if pf[j] <= 0.0 || !pf[j].is_finite() {
            continue;
        }
        let col = x.column(j);
        let g: f64 = col
            .iter()
            .zip(y.iter())
            .zip(w.iter())
            .map(|((x, y), w)| w * x * (y - wmean))
            .sum();
        lmax = lmax.max(2.0 * g.abs() / pf[j]);
    }
    lmax
}

fn make_grid(lmax: f64, penalty: &PenaltyConfig) -> Vec<f64> {
    if let Some(grid) = &penalty.lambda_grid {
        return grid.clone();
    }
    let lmax = if lmax > 0.0 { lmax } else { 1.0 };
    let lmin = lmax * penalty.lambda_min_ratio;
    let k = penalty.n_lambda.max(2);
    (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            (lmax.ln() + t * (lmin.ln() - lmax.ln())).exp()
        })
        .collect()
}

/// Assign B rows to folds. Rows sharing a fold label always land together;
/// without labels the assignment is a seeded random round-robin.
pub fn assign_folds(
    n_b: usize,
    v_folds: usize,
    fold_labels: Option<&[u64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match fold_labels {
        Some(labels) => {
            if labels.len() != n_b {
                return Err(Error::Dimension(format!(
                    "{} fold labels for {n_b} B units",
                    labels.len()
                )));
            }
            let mut groups: Vec<u64> = labels.to_vec();
            groups.sort_unstable();
            groups.dedup();
            if groups.len() < v_folds {
                return Err(Error::Config(format!(
                    "{} fold groups but {v_folds} folds requested",
                    groups.len()
                )));
            }
            groups.shuffle(rng);
            let fold_of = |g: u64| groups.iter().position(|&x| x == g).unwrap() % v_folds;
            Ok(labels.iter().map(|&g| fold_of(g)).collect())
        }
        None => {
            if n_b < v_folds {
                return Err(Error::Config(format!(
                    "{n_b} B units but {v_folds} folds requested"
                )));
            }
            let mut idx: Vec<usize> = (0..n_b).collect();
            idx.shuffle(rng);
            let mut folds = vec![0usize; n_b];
            for (pos, &i) in idx.iter().enumerate() {
                folds[i] = pos % v_folds;
            }
            Ok(folds)
        }
    }
}

fn subset_problem(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    rows: &[usize],
    pf: &DVector<f64>,
    lambda: f64,
) -> WlsProblem {
    let q = x.ncols();
    let xm = DMatrix::from_fn(rows.len(), q, |i, j| x[(rows[i], j)]);
    let ym = DVector::from_fn(rows.len(), |i, _| y[rows[i]]);
    let wm = DVector::from_fn(rows.len(), |i, _| w[rows[i]]);
    WlsProblem {
        x: xm,
        y: ym,
        w: wm,
        penalty_factors: pf.clone(),
        lambda,
    }
}

/// V-fold cross-validation over the lambda grid on a frozen working response.
/// Loss is the held-out weighted squared error.
fn cv_lambda_core(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    pf: &DVector<f64>,
    grid: &[f64],
    penalty: &PenaltyConfig,
    cfg: &SolverConfig,
) -> Result<CvCurve> {
    if grid.len() == 1 {
        return Ok(CvCurve {
            lambdas: grid.to_vec(),
            mean_loss: vec![f64::NAN],
            fold_loss: vec![vec![]],
            selected: grid[0],
        });
    }
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(penalty.seed);
    let folds = assign_folds(n, penalty.v_folds, penalty.fold_labels.as_deref(), &mut rng)?;
    let mut fold_loss = vec![vec![0.0f64; penalty.v_folds]; grid.len()];
    for v in 0..penalty.v_folds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != v).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == v).collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("empty cross-validation fold".into()));
        }
        let prob = subset_problem(x, y, w, &train, pf, grid[0]);
        let engine = CdEngine::new(&prob.x, &prob.y, &prob.w);
        let mut warm: Option<DVector<f64>> = None;
        for (k, &lambda) in grid.iter().enumerate() {
            let beta = engine.solve(pf, lambda, cfg, warm.as_ref())?;
            let loss: f64 = test
                .iter()
                .map(|&i| {
                    let mut eta = 0.0;
                    for j in 0..x.ncols() {
                        eta += x[(i, j)] * beta[j];
                    }
                    w[i] * (y[i] - eta) * (y[i] - eta)
                })
                .sum();
            fold_loss[k][v] = loss;
            warm = Some(beta);
        }
    }
    let mean_loss: Vec<f64> = fold_loss
        .iter()
        .map(|l| l.iter().sum::<f64>() / l.len() as f64)
        .collect();
    let best = mean_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(CvCurve {
        lambdas: grid.to_vec(),
        mean_loss,
        fold_loss: (0..grid.len()).map(|k| fold_loss[k].clone()).collect(),
        selected: grid[best],
    })
}

/// Select lambda by V-fold cross-validation on B for the given per-covariate
/// penalty factors (length p; entries may be infinite to exclude a covariate).
pub fn cv_lambda(
    sample: &CombinedSample,
    factors: &[f64],
    penalty: &PenaltyConfig,
) -> Result<CvCurve> {
    penalty.validate()?;
    let ws = PropensityWorkspace::build(sample)?;
    let (x, pf, _kept) = penalized_design(&ws, factors);
    let lmax = lambda_max(&x, &ws.wr.ystar, &ws.wr.w, &pf);
    let grid = make_grid(lmax, penalty);
    cv_lambda_core(
        &x,
        &ws.wr.ystar,
        &ws.wr.w,
        &pf,
        &grid,
        penalty,
        &SolverConfig::default(),
    )
}

/// Build the penalized design over B: intercept plus every covariate whose
/// factor is finite; factors are rescaled by the weighted column sd so the
/// penalty acts on standardized coefficients.
fn penalized_design(
    ws: &PropensityWorkspace,
    factors: &[f64],
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let kept: Vec<usize> = ws
        .all
        .iter()
        .copied()
        .filter(|&j| factors[j].is_finite())
        .collect();
    let n = ws.xb.nrows();
    let mut x = DMatrix::zeros(n, kept.len() + 1);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for (k, &j) in kept.iter().enumerate() {
            x[(i, k + 1)] = ws.xb[(i, j + 1)];
        }
    }
    let scales = column_scales(&x, &ws.wr.w);
    let mut pf = DVector::zeros(kept.len() + 1);
    for (k, &j) in kept.iter().enumerate() {
        pf[k + 1] = factors[j] * scales[k + 1];
    }
    (x, pf, kept)
}

fn finish_penalized(
    sample: &CombinedSample,
    ws: &PropensityWorkspace,
    kept: &[usize],
    beta: &DVector<f64>,
    method: PropensityMethod,
    lambda: f64,
    curve: Option<CvCurve>,
    refit: bool,
) -> Result<PropensityFit> {
    let active: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(k, _)| beta[k + 1] != 0.0)
        .map(|(_, &j)| j)
        .collect();
    if refit {
        let mut fit = fit_newton(sample, &active)?;
        fit.method = method;
        fit.lambda = Some(lambda);
        fit.cv_curve = curve;
        return Ok(fit);
    }
    let (p_a, p_b, clamp_count) =
        probabilities_kept(sample, kept, beta, &PositivityConfig::default());
    Ok(PropensityFit {
        method,
        subset: kept.to_vec(),
        beta: beta.clone(),
        active_set: active,
        p_a,
        p_b,
        converged: true,
        iterations: ws.full.iterations,
        lambda: Some(lambda),
        clamp_count,
        cv_curve: curve,
        collab_mhat: None,
        penalty_scales: None,
    })
}

fn probabilities_kept(
    sample: &CombinedSample,
    kept: &[usize],
    beta: &DVector<f64>,
    pos: &PositivityConfig,
) -> (Vec<f64>, Vec<f64>, usize) {
    probabilities(sample, kept, beta, pos)
}

/// LASSO propensity fit: unit penalty factors, lambda by cross-validation.
pub fn fit_lasso(sample: &CombinedSample, penalty: &PenaltyConfig) -> Result<PropensityFit> {
    let ws = PropensityWorkspace::build(sample)?;
    fit_lasso_with(sample, &ws, penalty)
}

pub fn fit_lasso_with(
    sample: &CombinedSample,
    ws: &PropensityWorkspace,
    penalty: &PenaltyConfig,
) -> Result<PropensityFit> {
    penalty.validate()?;
    let factors = vec![1.0; sample.p()];
    penalized_fit(sample, ws, &factors, penalty, PropensityMethod::Lasso)
}

/// Outcome-adaptive LASSO: penalty factors 1/|alpha_j|^gamma from an outcome
/// regression on A, then one penalized WLS on the frozen working response.
pub fn fit_oalasso(
    sample: &CombinedSample,
    penalty: &PenaltyConfig,
    family: OutcomeFamily,
) -> Result<PropensityFit> {
    let ws = PropensityWorkspace::build(sample)?;
    fit_oalasso_with(sample, &ws, penalty, family)
}

pub fn fit_oalasso_with(
    sample: &CombinedSample,
    ws: &PropensityWorkspace,
    penalty: &PenaltyConfig,
    family: OutcomeFamily,
) -> Result<PropensityFit> {
    penalty.validate()?;
    let alpha = outcome_coefficients(sample, family)?;
    let factors = adaptive_factors(&alpha, penalty.gamma);
    let mut fit = penalized_fit(sample, ws, &factors, penalty, PropensityMethod::Oalasso)?;
    fit.method = PropensityMethod::Oalasso;
    Ok(fit)
}

/// 1/|alpha_j|^gamma per covariate; coefficients below the floor give an
/// infinite factor, which excludes the covariate from the penalized design.
pub fn adaptive_factors(alpha: &DVector<f64>, gamma: f64) -> Vec<f64> {
    alpha
        .iter()
        .skip(1) // intercept never enters the penalty weights
        .map(|&a| {
            if a.abs() < ALPHA_FLOOR {
                f64::INFINITY
            } else {
                a.abs().powf(-gamma)
            }
        })
        .collect()
}

fn penalized_fit(
    sample: &CombinedSample,
    ws: &PropensityWorkspace,
    factors: &[f64],
    penalty: &PenaltyConfig,
    method: PropensityMethod,
) -> Result<PropensityFit> {
    let cfg = SolverConfig::default();
    let (x, pf, kept) = penalized_design(ws, factors);
    let lmax = lambda_max(&x, &ws.wr.ystar, &ws.wr.w, &pf);
    let grid = make_grid(lmax, penalty);
    let curve = cv_lambda_core(&x, &ws.wr.ystar, &ws.wr.w, &pf, &grid, penalty, &cfg)?;
    let selected = curve.selected;
    if selected == 0.0 {
        // With the penalty off the fixed point of the reweighting below is the
        // unpenalized pseudo-MLE, which the full Newton fit already is.
        let mut fit = ws.full.clone();
        fit.method = method;
        fit.lambda = Some(0.0);
        fit.cv_curve = Some(curve);
        return Ok(fit);
    }
    // path down to the selected lambda with warm starts
    let engine = CdEngine::new(&x, &ws.wr.ystar, &ws.wr.w);
    let mut warm: Option<DVector<f64>> = None;
    let mut beta = None;
    for &lambda in &grid {
        let b = engine.solve(&pf, lambda, &cfg, warm.as_ref())?;
        if lambda == selected {
            beta = Some(b.clone());
        }
        warm = Some(b);
        if lambda <= selected {
            break;
        }
    }
    let beta = beta.expect("selected lambda is on the grid");
    let scales = column_scales(&x, &ws.wr.w);
    let mut fit = finish_penalized(
        sample,
        ws,
        &kept,
        &beta,
        method,
        selected,
        Some(curve),
        penalty.refit,
    )?;
    if !penalty.refit {
        fit.penalty_scales = Some(scales);
    }
    Ok(fit)
}

/// BIC over a SCAD path on a working WLS problem; returns (beta, lambda).
/// BIC is the standard sparse-tuning choice for SCAD.
fn scad_path_bic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    pf: &DVector<f64>,
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, f64)> {
    let n = x.nrows() as f64;
    let wsum: f64 = w.sum();
    let mut best: Option<(f64, DVector<f64>, f64)> = None;
    let engine = CdEngine::new(x, y, w);
    let mut warm: Option<DVector<f64>> = None;
    for &lambda in grid {
        let beta = engine.solve_scad(pf, lambda, cfg, warm.as_ref())?;
        warm = Some(beta.clone());
        let rss = engine.quad_loss(&beta) / wsum;
        let df = beta.iter().filter(|&&b| b != 0.0).count() as f64;
        // extended BIC: the ln q term guards against noise selection when
        // the candidate set is large relative to the effective sample size;
        // gamma = 2 keeps the union step near-oracle sparse
        let q = (x.ncols() - 1).max(1) as f64;
        let bic = n * rss.max(1e-300).ln() + (n.ln() + 4.0 * q.ln()) * df;
        if best.as_ref().map_or(true, |(b, _, _)| bic < *b) {
            best = Some((bic, beta, lambda));
        }
    }
    let (_, beta, lambda) = best.unwrap();
    Ok((beta, lambda))
}

/// Two-step SCAD union: SCAD on the propensity working response gives C_p,
/// SCAD on the outcome regression over A gives C_m, then an unpenalized
/// Newton refit on C = C_p UNION C_m. Returns the fit and C for the
/// downstream outcome refit.
pub fn fit_scad_union(
    sample: &CombinedSample,
    penalty: &PenaltyConfig,
    family: OutcomeFamily,
) -> Result<(PropensityFit, Vec<usize>)> {
    let ws = PropensityWorkspace::build(sample)?;
    fit_scad_union_with(sample, &ws, penalty, family)
}

pub fn fit_scad_union_with(
    sample: &CombinedSample,
    ws: &PropensityWorkspace,
    penalty: &PenaltyConfig,
    family: OutcomeFamily,
) -> Result<(PropensityFit, Vec<usize>)> {
    penalty.validate()?;
    let cfg = SolverConfig::default();
    let p = sample.p();
    let factors = vec![1.0; p];

    // step 1a: SCAD on the propensity working response
    let (x, pf, kept) = penalized_design(ws, &factors);
    let lmax = lambda_max(&x, &ws.wr.ystar, &ws.wr.w, &pf);
    let grid = make_grid(lmax, penalty);
    let (beta_p, lambda_p) = scad_path_bic(&x, &ws.wr.ystar, &ws.wr.w, &pf, &grid, &cfg)?;
    let c_p: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(k, _)| beta_p[k + 1] != 0.0)
        .map(|(_, &j)| j)
        .collect();

    // step 1b: SCAD on the outcome regression over A
    let subset: Vec<usize> = (0..p).collect();
    let xa = sample.design_matrix(&subset, true, Membership::A)?;
    let ya = match family {
        OutcomeFamily::Linear | OutcomeFamily::Logistic => DVector::from_vec(sample.y_a()),
    };
    let wa = DVector::from_element(xa.nrows(), 1.0);
    let scales = column_scales(&xa, &wa);
    let mut pf_a = DVector::zeros(p + 1);
    for j in 0..p {
        pf_a[j + 1] = scales[j + 1];
    }
    let lmax_a = lambda_max(&xa, &ya, &wa, &pf_a);
    let grid_a = make_grid(lmax_a, penalty);
    let (beta_m, _) = scad_path_bic(&xa, &ya, &wa, &pf_a, &grid_a, &cfg)?;
    let c_m: Vec<usize> = (0..p).filter(|&j| beta_m[j + 1] != 0.0).collect();

    // step 2: union and unpenalized refit
    let mut c = c_p.clone();
    for j in c_m {
        if !c.contains(&j) {
            c.push(j);
        }
    }
    c.sort_unstable();
    let mut fit = fit_newton(sample, &c)?;
    fit.method = PropensityMethod::ScadUnion;
    fit.lambda = Some(lambda_p);
    Ok((fit, c))
}

/// Collaborative propensity: the pseudo-likelihood fit with the single
/// covariate m-hat(X) plus intercept.
pub fn fit_collaborative(
    sample: &CombinedSample,
    mhat_a: &[f64],
    mhat_b: &[f64],
) -> Result<PropensityFit> {
    if mhat_a.len() != sample.n_a() || mhat_b.len() != sample.n_b() {
        return Err(Error::Dimension(
            "m-hat must cover every unit in A and B".into(),
        ));
    }
    let all: Vec<f64> = mhat_a.iter().chain(mhat_b.iter()).copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / all.len() as f64;
    if var < 1e-12 {
        return Err(Error::Degenerate(
            "constant m-hat is collinear with the intercept".into(),
        ));
    }
    let xa = DMatrix::from_fn(mhat_a.len(), 2, |i, j| if j == 0 { 1.0 } else { mhat_a[i] });
    let xb = DMatrix::from_fn(mhat_b.len(), 2, |i, j| if j == 0 { 1.0 } else { mhat_b[i] });
    let d_b = sample.d_b();
    let (beta, iterations) = newton_core(&xa, &xb, &d_b)?;
    let pos = PositivityConfig::default();
    let mut clamps = 0usize;
    let mut prob_of = |m: f64| {
        let p = expit(beta[0] + beta[1] * m);
        let c = pos.clamp(p);
        if c != p {
            clamps += 1;
        }
        c
    };
    let p_a: Vec<f64> = mhat_a.iter().map(|&m| prob_of(m)).collect();
    let p_b: Vec<f64> = mhat_b.iter().map(|&m| prob_of(m)).collect();
    Ok(PropensityFit {
        method: PropensityMethod::Collaborative,
        subset: vec![],
        beta,
        active_set: vec![],
        p_a,
        p_b,
        converged: true,
        iterations,
        lambda: None,
        clamp_count: clamps,
        cv_curve: None,
        collab_mhat: Some((mhat_a.to_vec(), mhat_b.to_vec())),
        penalty_scales: None,
    })
}

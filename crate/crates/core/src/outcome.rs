//! Outcome regression m(X) = E(Y|X) fit on sample A: parametric linear and
//! logistic families plus a flexible basis-expansion LASSO for nonlinear
//! settings.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{CombinedSample, Membership};
use crate::error::{Error, Result};
use crate::solvers::{wls_solve, CdEngine, SolverConfig, WlsProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeFamily {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Linear,
    Logistic,
    Flexible,
}

/// One feature of the expanded basis, with the training-data standardization
/// baked in so prediction is reproducible.
#[derive(Debug, Clone, Serialize)]
pub enum BasisTerm {
    Main { j: usize },
    Square { j: usize },
    Interaction { j: usize, k: usize },
    Hinge { j: usize, knot: f64 },
}

impl BasisTerm {
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            BasisTerm::Main { j } => x[j],
            BasisTerm::Square { j } => x[j] * x[j],
            BasisTerm::Interaction { j, k } => x[j] * x[k],
            BasisTerm::Hinge { j, knot } => (x[j] - knot).max(0.0),
        }
    }
}

/// Basis of the flexible model: main effects, squares, pairwise products and
/// per-covariate hinge terms at empirical quartiles. Zero-variance terms are
/// dropped at construction.
#[derive(Debug, Clone, Serialize)]
pub struct BasisDescriptor {
    pub terms: Vec<BasisTerm>,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
}

impl BasisDescriptor {
    /// Build from the A rows; terms are standardized to the training data.
    pub fn build(rows: &[Vec<f64>]) -> BasisDescriptor {
        let p = rows.first().map_or(0, |r| r.len());
        let n = rows.len();
        let mut candidates = Vec::new();
        for j in 0..p {
            candidates.push(BasisTerm::Main { j });
        }
        for j in 0..p {
            candidates.push(BasisTerm::Square { j });
        }
        for j in 0..p {
            for k in (j + 1)..p {
                candidates.push(BasisTerm::Interaction { j, k });
            }
        }
        for j in 0..p {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for q in [0.25, 0.5, 0.75] {
                let knot = col[((n - 1) as f64 * q).round() as usize];
                candidates.push(BasisTerm::Hinge { j, knot });
            }
        }
        let mut terms = Vec::new();
        let mut centers = Vec::new();
        let mut scales = Vec::new();
        for term in candidates {
            let vals: Vec<f64> = rows.iter().map(|r| term.eval(r)).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var < 1e-12 {
                continue;
            }
            terms.push(term);
            centers.push(mean);
            scales.push(var.sqrt());
        }
        BasisDescriptor {
            terms,
            centers,
            scales,
        }
    }

    /// Expanded design with intercept column first.
    pub fn design(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let q = self.terms.len() + 1;
        let mut m = DMatrix::zeros(rows.len(), q);
        for (i, row) in rows.iter().enumerate() {
            m[(i, 0)] = 1.0;
            for (k, term) in self.terms.iter().enumerate() {
                m[(i, k + 1)] = (term.eval(row) - self.centers[k]) / self.scales[k];
            }
        }
        m
    }
}

/// A fitted outcome model; `coef` aligns with intercept + subset (parametric)
/// or intercept + basis terms (flexible).
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub kind: OutcomeKind,
    pub coef: DVector<f64>,
    pub subset: Vec<usize>,
    pub basis: Option<BasisDescriptor>,
    pub lambda: Option<f64>,
    pub iterations: usize,
}

impl OutcomeFit {
    fn eta(&self, x: &[f64]) -> f64 {
        match &self.basis {
            Some(basis) => {
                let mut eta = self.coef[0];
                for (k, term) in basis.terms.iter().enumerate() {
                    eta += self.coef[k + 1] * (term.eval(x) - basis.centers[k]) / basis.scales[k];
                }
                eta
            }
            None => {
                let mut eta = self.coef[0];
                for (k, &j) in self.subset.iter().enumerate() {
                    eta += self.coef[k + 1] * x[j];
                }
                eta
            }
        }
    }
}

/// Unweighted logistic IRLS; y entries in {0, 1}. Shared with the propensity
/// module's outcome step.
pub(crate) fn logistic_irls(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, q) = x.shape();
    let mut beta = DVector::zeros(q);
    for _ in 0..100 {
        let eta = x * &beta;
        let mut w = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let p = crate::propensity::expit(eta[i]).clamp(1e-10, 1.0 - 1e-10);
            let v = p * (1.0 - p);
            w[i] = v;
            z[i] = eta[i] + (y[i] - p) / v;
        }
        let prob = WlsProblem::new(x.clone(), z, w, DVector::zeros(q), 0.0)?;
        let next = wls_solve(&prob)?;
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-10 {
            return Ok(beta);
        }
        if beta.amax() > 100.0 {
            return Err(Error::Separation);
        }
    }
    Ok(beta)
}

/// Parametric outcome fit on the A rows over the given covariate subset.
pub fn fit_outcome(
    sample: &CombinedSample,
    family: OutcomeFamily,
    subset: &[usize],
) -> Result<OutcomeFit> {
    let q = subset.len() + 1;
    if family == OutcomeFamily::Linear && sample.n_a() <= q {
        return Err(Error::InsufficientData(format!(
            "n_a = {} for a {q}-parameter linear fit",
            sample.n_a()
        )));
    }
    let xa = sample.design_matrix(subset, true, Membership::A)?;
    let y = DVector::from_vec(sample.y_a());
    let coef = match family {
        OutcomeFamily::Linear => {
            let w = DVector::from_element(xa.nrows(), 1.0);
            wls_solve(&WlsProblem::new(xa, y, w, DVector::zeros(q), 0.0)?)?
        }
        OutcomeFamily::Logistic => logistic_irls(&xa, &y)?,
    };
    Ok(OutcomeFit {
        kind: match family {
            OutcomeFamily::Linear => OutcomeKind::Linear,
            OutcomeFamily::Logistic => OutcomeKind::Logistic,
        },
        coef,
        subset: subset.to_vec(),
        basis: None,
        lambda: None,
        iterations: 0,
    })
}

/// Flexible outcome model: expanded basis fit with LASSO, lambda by 5-fold
/// cross-validation on A.
pub fn fit_outcome_flexible(sample: &CombinedSample, seed: u64) -> Result<OutcomeFit> {
    let rows: Vec<Vec<f64>> = sample.a_records().map(|r| r.x.clone()).collect();
    let y = DVector::from_vec(sample.y_a());
    let basis = BasisDescriptor::build(&rows);
    let x = basis.design(&rows);
    let (n, q) = x.shape();
    let w = DVector::from_element(n, 1.0);
    let mut pf = DVector::from_element(q, 1.0);
    pf[0] = 0.0;

    // lambda grid from the KKT bound at the intercept-only fit
    let ymean = y.sum() / n as f64;
    let mut lmax = 0.0f64;
    for j in 1..q {
        let g: f64 = x
            .column(j)
            .iter()
            .zip(y.iter())
            .map(|(x, y)| x * (y - ymean))
            .sum();
        lmax = lmax.max(2.0 * g.abs());
    }
    let lmax = if lmax > 0.0 { lmax } else { 1.0 };
    let n_lambda = 50;
    let grid: Vec<f64> = (0..n_lambda)
        .map(|i| {
            let t = i as f64 / (n_lambda - 1) as f64;
            (lmax.ln() + t * ((1e-4f64).ln())).exp()
        })
        .collect();

    // 5-fold CV, random seeded folds
    let v = 5usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut fold = vec![0usize; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold[i] = pos % v;
    }
    // predictive fit only: a looser sweep tolerance is plenty, and the
    // correlated hinge columns make tight coordinate descent crawl
    let cfg = SolverConfig {
        tol: 1e-5,
        max_iter: 20_000,
        ..SolverConfig::default()
    };
    let mut mean_loss = vec![0.0f64; grid.len()];
    for f in 0..v {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let xt = DMatrix::from_fn(train.len(), q, |i, j| x[(train[i], j)]);
        let yt = DVector::from_fn(train.len(), |i, _| y[train[i]]);
        let wt = DVector::from_element(train.len(), 1.0);
        let engine = CdEngine::new(&xt, &yt, &wt);
        let mut warm: Option<DVector<f64>> = None;
        for (k, &lambda) in grid.iter().enumerate() {
            let beta = engine.solve(&pf, lambda, &cfg, warm.as_ref())?;
            let loss: f64 = test
                .iter()
                .map(|&i| {
                    let eta: f64 = (0..q).map(|j| x[(i, j)] * beta[j]).sum();
                    (y[i] - eta) * (y[i] - eta)
                })
                .sum();
            mean_loss[k] += loss / v as f64;
            warm = Some(beta);
        }
    }
    let best = mean_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let selected = grid[best];
    let engine = CdEngine::new(&x, &y, &w);
    let mut warm: Option<DVector<f64>> = None;
    let mut coef = None;
    for &lambda in &grid[..=best] {
        let b = engine.solve(&pf, lambda, &cfg, warm.as_ref())?;
        if lambda == selected {
            coef = Some(b.clone());
        }
        warm = Some(b);
    }
    Ok(OutcomeFit {
        kind: OutcomeKind::Flexible,
        coef: coef.unwrap(),
        subset: vec![],
        basis: Some(basis),
        lambda: Some(selected),
        iterations: 0,
    })
}

/// Deterministic predictions; logistic fits return probabilities in (0,1).
pub fn predict_rows(fit: &OutcomeFit, rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter()
        .map(|x| {
            let eta = fit.eta(x);
            match fit.kind {
                OutcomeKind::Logistic => crate::propensity::expit(eta),
                _ => eta,
            }
        })
        .collect()
}

/// Predictions over the requested membership, record order.
pub fn predict(
    fit: &OutcomeFit,
    sample: &CombinedSample,
    membership: Membership,
) -> Result<Vec<f64>> {
    let check = |x: &[f64]| -> Result<()> {
        let need = match &fit.basis {
            Some(_) => x.len(),
            None => fit.subset.iter().copied().max().map_or(0, |m| m + 1),
        };
        if x.len() < need {
            return Err(Error::Dimension(format!(
                "record has {} covariates, fit needs {need}",
                x.len()
            )));
        }
        Ok(())
    };
    let rows: Vec<Vec<f64>> = sample
        .records()
        .iter()
        .filter(|r| match membership {
            Membership::A => r.delta,
            Membership::B => r.in_b,
            Membership::All => true,
        })
        .map(|r| r.x.clone())
        .collect();
    if let Some(first) = rows.first() {
        check(first)?;
    }
    Ok(predict_rows(fit, &rows))
}

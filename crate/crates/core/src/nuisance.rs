//! First-step models: outcome probabilities `Pi_t(d, x)`, the propensity
//! `P(x)`, and cross-fitting.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{discretize, TwoPeriodPanel, Unit, DEFAULT_LEVEL_CAP};
use crate::error::{Error, Result};
use crate::stats::logistic;

pub const DEFAULT_TRIM: f64 = 0.01;
pub const DEFAULT_FOLDS: usize = 5;
const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
const RIDGE: f64 = 1e-8;
const SEPARATION_INDEX: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NuisanceMethod {
    Logistic,
    CellMeans,
    Constant,
    /// Values supplied directly through [`NuisanceFit::from_values`].
    Injected,
}

impl std::str::FromStr for NuisanceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "logistic" => Ok(NuisanceMethod::Logistic),
            "cell_means" | "cells" => Ok(NuisanceMethod::CellMeans),
            "constant" => Ok(NuisanceMethod::Constant),
            other => Err(Error::InvalidInput(format!("unknown nuisance method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub method: NuisanceMethod,
    pub trim: f64,
    /// Number of cross-fitting folds; `None` fits on the full sample.
    pub folds: Option<usize>,
    pub seed: u64,
    pub level_cap: usize,
    /// Treat the first covariate as the pre-period outcome: `Pi_0(d, z)` is
    /// then `z[0]` exactly and is not fitted.
    #[serde(default)]
    pub pi0_is_first_covariate: bool,
}

impl NuisanceConfig {
    pub fn new(method: NuisanceMethod) -> Self {
        NuisanceConfig {
            method,
            trim: DEFAULT_TRIM,
            folds: None,
            seed: 0,
            level_cap: DEFAULT_LEVEL_CAP,
            pi0_is_first_covariate: false,
        }
    }

    pub fn cross_fit(mut self, k: usize, seed: u64) -> Self {
        self.folds = Some(k);
        self.seed = seed;
        self
    }
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self::new(NuisanceMethod::Logistic)
    }
}

/// Fold assignment stratified by treatment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

fn content_order(units: &[Unit], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| {
        let (ua, ub) = (&units[a], &units[b]);
        (ua.y0, ua.y1)
            .cmp(&(ub.y0, ub.y1))
            .then_with(|| {
                ua.x.iter()
                    .zip(&ub.x)
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| ua.cluster.cmp(&ub.cluster))
    });
}

impl FoldPlan {
    /// Units of each arm are put in a canonical content order, shuffled by
    /// `seed`, and dealt round robin. The deal counter carries over from the
    /// control arm to the treated arm so overall fold sizes differ by at most 1.
    pub fn new(panel: &TwoPeriodPanel, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput("cross-fitting needs k >= 2".into()));
        }
        let units = panel.units();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assignment = vec![0; units.len()];
        let mut counter = 0usize;
        for d in 0..2u8 {
            let mut idx: Vec<usize> = (0..units.len()).filter(|&i| units[i].d == d).collect();
            content_order(units, &mut idx);
            idx.shuffle(&mut rng);
            for i in idx {
                assignment[i] = counter % k;
                counter += 1;
            }
        }
        Ok(FoldPlan {
            k,
            seed,
            assignment,
        })
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Logistic regression fitted by IRLS. `coef[0]` is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Inverse observed information at the solution (row-major, `k x k`).
    #[serde(skip)]
    pub cov: Vec<f64>,
}

impl LogisticFit {
    pub fn index(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        logistic(self.index(x))
    }

    pub fn std_error(&self, j: usize) -> f64 {
        let k = self.coef.len();
        self.cov[j * k + j].sqrt()
    }
}

pub fn fit_logistic(xs: &[&[f64]], y: &[f64], what: &str) -> Result<LogisticFit> {
    let n = xs.len();
    let k = xs.first().map_or(0, |x| x.len()) + 1;
    if n < k {
        return Err(Error::InsufficientArm(format!(
            "{what}: {n} units for {k} parameters"
        )));
    }
    let design = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::<f64>::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::<f64>::identity(k, k);
    for it in 0..=IRLS_MAX_ITER {
        let eta = &design * &beta;
        if eta.amax() > SEPARATION_INDEX {
            return Err(Error::Separation(what.to_string()));
        }
        let mu = eta.map(logistic);
        let w = mu.map(|m| m * (1.0 - m));
        let score = design.transpose() * (&yv - &mu);
        let mut weighted = design.clone();
        for (mut row, wi) in weighted.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        info = design.transpose() * weighted;
        iterations = it;
        if score.amax() / n as f64 <= IRLS_TOL {
            converged = true;
            break;
        }
        if it == IRLS_MAX_ITER {
            break;
        }
        let h = &info + DMatrix::<f64>::identity(k, k) * RIDGE;
        let step = h
            .cholesky()
            .ok_or_else(|| Error::RankDeficientX(format!("{what}: singular information matrix")))?
            .solve(&score);
        beta += step;
    }
    if !converged {
        log::warn!("{what}: IRLS did not converge in {IRLS_MAX_ITER} iterations");
    }
    let cov = (info + DMatrix::<f64>::identity(k, k) * RIDGE)
        .try_inverse()
        .ok_or_else(|| Error::RankDeficientX(format!("{what}: singular information matrix")))?;
    Ok(LogisticFit {
        coef: beta.iter().copied().collect(),
        iterations,
        converged,
        cov: cov.transpose().iter().copied().collect(),
    })
}

fn cell_key(x: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 must land in the same cell.
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// A fitted probability model over covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbModel {
    Constant(f64),
    Cells {
        means: HashMap<Vec<u64>, f64>,
        /// Used for covariate values with no training units.
        fallback: f64,
    },
    Logistic(LogisticFit),
    /// Returns one covariate coordinate unchanged.
    Coordinate(usize),
}

impl ProbModel {
    fn fit(method: NuisanceMethod, xs: &[&[f64]], y: &[f64], what: &str) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InsufficientArm(format!("{what}: no units")));
        }
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        match method {
            NuisanceMethod::Constant | NuisanceMethod::Injected => Ok(ProbModel::Constant(mean)),
            NuisanceMethod::CellMeans => {
                let mut acc: HashMap<Vec<u64>, (f64, usize)> = HashMap::new();
                for (x, &v) in xs.iter().zip(y) {
                    let e = acc.entry(cell_key(x)).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
                Ok(ProbModel::Cells {
                    means: acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
                    fallback: mean,
                })
            }
            NuisanceMethod::Logistic => Ok(ProbModel::Logistic(fit_logistic(xs, y, what)?)),
        }
    }

    /// Prediction and whether a cell fallback was used.
    fn predict_flagged(&self, x: &[f64]) -> (f64, bool) {
        match self {
            ProbModel::Constant(c) => (*c, false),
            ProbModel::Cells { means, fallback } => match means.get(&cell_key(x)) {
                Some(&m) => (m, false),
                None => (*fallback, true),
            },
            ProbModel::Logistic(f) => (f.predict(x), false),
            ProbModel::Coordinate(j) => (x[*j], false),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_flagged(x).0
    }

    fn meta(&self) -> (bool, usize) {
        match self {
            ProbModel::Logistic(f) => (f.converged, f.iterations),
            _ => (true, 0),
        }
    }
}

/// Per-unit nuisance values consumed by the estimators. `pi[t][d][i]` is
/// `Pi_t(d, X_i)`; `p[i]` is the trimmed propensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceValues {
    pub pi: [[Vec<f64>; 2]; 2],
    pub p: Vec<f64>,
}

impl NuisanceValues {
    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn delta0(&self, i: usize) -> f64 {
        self.pi[1][0][i] - self.pi[0][0][i]
    }

    pub fn odds(&self, i: usize) -> f64 {
        self.p[i] / (1.0 - self.p[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub method: NuisanceMethod,
    /// Order: pi00, pi01, pi10, pi11 (`pi{t}{d}`), then propensity.
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    pub trim: f64,
    pub trimmed_propensities: usize,
    pub cell_fallbacks: usize,
    pub cross_fitted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

/// Fitted nuisance models plus the per-unit values used downstream.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    /// Full-sample models `[t][d]`; absent for injected values.
    pub pi: Option<[[ProbModel; 2]; 2]>,
    pub p: Option<ProbModel>,
    pub values: NuisanceValues,
    pub meta: FitMeta,
    pub fold_plan: Option<FoldPlan>,
}

pub fn trim_probability(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Odds `p / (1 - p)` after trimming `p` to `[eps, 1 - eps]`.
pub fn trimmed_odds(p: f64, eps: f64) -> f64 {
    let p = trim_probability(p, eps);
    p / (1.0 - p)
}

struct ModelSet {
    pi: [[ProbModel; 2]; 2],
    p: ProbModel,
}

fn fit_models(units: &[&Unit], method: NuisanceMethod, pi0_known: bool) -> Result<ModelSet> {
    let fit_arm = |t: usize, d: u8| -> Result<ProbModel> {
        if t == 0 && pi0_known {
            return Ok(ProbModel::Coordinate(0));
        }
        let arm: Vec<&&Unit> = units.iter().filter(|u| u.d == d).collect();
        let xs: Vec<&[f64]> = arm.iter().map(|u| u.x.as_slice()).collect();
        let y: Vec<f64> = arm
            .iter()
            .map(|u| if t == 0 { u.y0 } else { u.y1 } as f64)
            .collect();
        ProbModel::fit(method, &xs, &y, &format!("Pi_{t}(d={d})"))
    };
    let pi = [
        [fit_arm(0, 0)?, fit_arm(0, 1)?],
        [fit_arm(1, 0)?, fit_arm(1, 1)?],
    ];
    let xs: Vec<&[f64]> = units.iter().map(|u| u.x.as_slice()).collect();
    let d: Vec<f64> = units.iter().map(|u| u.d as f64).collect();
    let p = ProbModel::fit(method, &xs, &d, "propensity")?;
    Ok(ModelSet { pi, p })
}

pub fn fit_nuisance(panel: &TwoPeriodPanel, config: &NuisanceConfig) -> Result<NuisanceFit> {
    let method = config.method;
    if method == NuisanceMethod::Injected {
        return Err(Error::InvalidInput(
            "injected nuisance values are built with NuisanceFit::from_values".into(),
        ));
    }
    if method == NuisanceMethod::CellMeans && panel.dim_x() > 0 {
        let xs: Vec<&[f64]> = panel.units().iter().map(|u| u.x.as_slice()).collect();
        discretize(&xs, panel.dim_x(), config.level_cap)?;
    }
    if method == NuisanceMethod::Constant && panel.dim_x() > 0 {
        log::info!("constant nuisance ignores {} covariates", panel.dim_x());
    }
    let units: Vec<&Unit> = panel.units().iter().collect();
    let n = units.len();
    if config.pi0_is_first_covariate && panel.dim_x() == 0 {
        return Err(Error::InvalidInput("pi0_is_first_covariate needs a covariate".into()));
    }
    let full = fit_models(&units, method, config.pi0_is_first_covariate)?;

    let mut raw = NuisanceValues {
        pi: Default::default(),
        p: vec![0.0; n],
    };
    for t in 0..2 {
        for d in 0..2 {
            raw.pi[t][d] = vec![0.0; n];
        }
    }
    let mut fallbacks = 0usize;
    let mut fill = |models: &ModelSet, idx: &[usize], raw: &mut NuisanceValues| {
        for &i in idx {
            let x = &units[i].x;
            for t in 0..2 {
                for d in 0..2 {
                    let (v, fb) = models.pi[t][d].predict_flagged(x);
                    raw.pi[t][d][i] = v;
                    fallbacks += fb as usize;
                }
            }
            let (v, fb) = models.p.predict_flagged(x);
            raw.p[i] = v;
            fallbacks += fb as usize;
        }
    };

    let fold_plan = match config.folds {
        Some(k) => Some(FoldPlan::new(panel, k, config.seed)?),
        None => None,
    };
    match &fold_plan {
        None => fill(&full, &(0..n).collect::<Vec<_>>(), &mut raw),
        Some(plan) => {
            for f in 0..plan.k {
                let train: Vec<&Unit> = (0..n)
                    .filter(|&i| plan.assignment[i] != f)
                    .map(|i| units[i])
                    .collect();
                let models = fit_models(&train, method, config.pi0_is_first_covariate)?;
                let held: Vec<usize> = (0..n).filter(|&i| plan.assignment[i] == f).collect();
                fill(&models, &held, &mut raw);
            }
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} nuisance predictions fell back to arm means (empty covariate cell)");
    }

    let mut trimmed = 0usize;
    for p in raw.p.iter_mut() {
        let t = trim_probability(*p, config.trim);
        if t != *p {
            trimmed += 1;
        }
        *p = t;
    }

    let mut converged = Vec::new();
    let mut iterations = Vec::new();
    for m in [&full.pi[0][0], &full.pi[0][1], &full.pi[1][0], &full.pi[1][1], &full.p] {
        let (c, it) = m.meta();
        converged.push(c);
        iterations.push(it);
    }
    Ok(NuisanceFit {
        pi: Some(full.pi),
        p: Some(full.p),
        values: raw,
        meta: FitMeta {
            method,
            converged,
            iterations,
            trim: config.trim,
            trimmed_propensities: trimmed,
            cell_fallbacks: fallbacks,
            cross_fitted: fold_plan.is_some(),
            folds: config.folds,
        },
        fold_plan,
    })
}

impl NuisanceFit {
    /// Wrap externally supplied per-unit values. Propensities are trimmed.
    pub fn from_values(mut values: NuisanceValues, trim: f64) -> Result<Self> {
        let n = values.p.len();
        if values.pi.iter().flatten().any(|v| v.len() != n) {
            return Err(Error::InvalidInput("nuisance value vectors differ in length".into()));
        }
        let mut trimmed = 0;
        for p in values.p.iter_mut() {
            let t = trim_probability(*p, trim);
            trimmed += (t != *p) as usize;
            *p = t;
        }
        Ok(NuisanceFit {
            pi: None,
            p: None,
            values,
            meta: FitMeta {
                method: NuisanceMethod::Injected,
                converged: vec![true; 5],
                iterations: vec![0; 5],
                trim,
                trimmed_propensities: trimmed,
                cell_fallbacks: 0,
                cross_fitted: false,
                folds: None,
            },
            fold_plan: None,
        })
    }

    fn models(&self) -> Result<(&[[ProbModel; 2]; 2], &ProbModel)> {
        match (&self.pi, &self.p) {
            (Some(pi), Some(p)) => Ok((pi, p)),
            _ => Err(Error::InvalidInput(
                "nuisance fit holds injected values only; no model to evaluate".into(),
            )),
        }
    }

    /// `Pi_t(d, x)` from the full-sample model.
    pub fn predict_pi(&self, t: usize, d: usize, x: &[f64]) -> Result<f64> {
        Ok(self.models()?.0[t][d].predict(x))
    }

    /// Trimmed propensity at `x` from the full-sample model.
    pub fn predict_p(&self, x: &[f64]) -> Result<f64> {
        Ok(trim_probability(self.models()?.1.predict(x), self.meta.trim))
    }
}

/// `Pi_1(0, x) - Pi_0(0, x)`.
pub fn predict_delta0(fit: &NuisanceFit, x: &[f64]) -> Result<f64> {
    Ok(fit.predict_pi(1, 0, x)? - fit.predict_pi(0, 0, x)?)
}

/// `P(x) / (1 - P(x))` with the propensity trimmed.
pub fn propensity_odds(fit: &NuisanceFit, x: &[f64]) -> Result<f64> {
    let p = fit.predict_p(x)?;
    Ok(p / (1.0 - p))
}

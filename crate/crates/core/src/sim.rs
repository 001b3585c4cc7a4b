//! Simulation designs with explicit potential outcomes, their population
//! values, and a Monte Carlo harness.
//!
//! Probabilities are affine in a covariate index `u(x) = logistic(kappa' x)`,
//! so checking them at `u = 0` and `u = 1` is enough to keep them in `[0, 1]`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{StaggeredPanel, StaggeredUnit, TwoPeriodPanel, Unit};
use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceMethod};
use crate::report::Target;
use crate::semipar::{estimate, Estimator, Link};
use crate::staggered::{espr, StaggeredEstimator};
use crate::stats::{logistic, two_sided_z};
use crate::twoperiod_reg::{fit_two_way_fe, gmm_iv, rate_from_fe};

/// Generator for replication `stream` of a run keyed by `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `intercept + slope * u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Affine {
    pub intercept: f64,
    #[serde(default)]
    pub slope: f64,
}

impl Affine {
    pub const fn constant(c: f64) -> Self {
        Affine { intercept: c, slope: 0.0 }
    }

    pub fn at(&self, u: f64) -> f64 {
        self.intercept + self.slope * u
    }

    fn range(&self) -> (f64, f64) {
        let (a, b) = (self.at(0.0), self.at(1.0));
        (a.min(b), a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Finite support with the given probabilities.
    Discrete { values: Vec<Vec<f64>>, probs: Vec<f64> },
    /// Independent normal coordinates.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw::Discrete {
            values: vec![Vec::new()],
            probs: vec![1.0],
        }
    }
}

impl CovariateLaw {
    pub fn dim(&self) -> usize {
        match self {
            CovariateLaw::Discrete { values, .. } => values.first().map_or(0, Vec::len),
            CovariateLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            CovariateLaw::Discrete { values, probs } => {
                let dim = self.dim();
                if values.is_empty() || values.len() != probs.len() || values.iter().any(|v| v.len() != dim) {
                    return Err(Error::InvalidInput("discrete covariate law: ragged values or probs".into()));
                }
                let total: f64 = probs.iter().sum();
                if probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput("discrete covariate probabilities must sum to 1".into()));
                }
            }
            CovariateLaw::Gaussian { mean, sd } => {
                if mean.len() != sd.len() || sd.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::InvalidInput("gaussian covariate law: need positive sd per coordinate".into()));
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateLaw::Discrete { values, probs } => {
                let idx = WeightedIndex::new(probs).expect("validated weights").sample(rng);
                values[idx].clone()
            }
            CovariateLaw::Gaussian { mean, sd } => mean
                .iter()
                .zip(sd)
                .map(|(&m, &s)| Normal::new(m, s).expect("validated sd").sample(rng))
                .collect(),
        }
    }

    /// Weighted support points: exact for discrete laws, a product
    /// Gauss-Hermite rule for Gaussian laws.
    pub fn nodes(&self) -> Result<Vec<(f64, Vec<f64>)>> {
        match self {
            CovariateLaw::Discrete { values, probs } => Ok(probs.iter().copied().zip(values.iter().cloned()).collect()),
            CovariateLaw::Gaussian { mean, sd } => {
                if mean.len() > 3 {
                    return Err(Error::InvalidInput("quadrature oracle supports at most 3 gaussian covariates".into()));
                }
                let (z, w) = gauss_hermite(GH_NODES);
                let mut out = vec![(1.0, Vec::new())];
                for (&m, &s) in mean.iter().zip(sd) {
                    let mut next = Vec::with_capacity(out.len() * z.len());
                    for (wt, x) in &out {
                        for k in 0..z.len() {
                            let mut x = x.clone();
                            x.push(m + s * std::f64::consts::SQRT_2 * z[k]);
                            next.push((wt * w[k] / std::f64::consts::PI.sqrt(), x));
                        }
                    }
                    out = next;
                }
                Ok(out)
            }
        }
    }
}

pub const GH_NODES: usize = 64;

/// Physicists' Gauss-Hermite nodes and weights (weight `exp(-z^2)`) by
/// Golub-Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v * v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn dot_index(coef: &[f64], x: &[f64]) -> f64 {
    coef.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn check_prob(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if lo < 0.0 || hi > 1.0 || lo.is_nan() || hi.is_nan() {
        return Err(Error::InvalidInput(format!(
            "{name} leaves [0, 1] over the covariate range ([{lo}, {hi}])"
        )));
    }
    Ok(())
}

fn add_ranges(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 + b.0, a.1 + b.1)
}

fn default_persistence() -> f64 {
    0.5
}

/// Two-period design. Untreated outcomes follow
/// `Pr(Y_t(0) = 1 | D = d, x) = G(t, x) + H(d, x)`; among units with
/// `Y_1(0) = 0` a share `persuasion(x)` switch to 1 when exposed, and with
/// `backlash` on a share `backlash_rate` of those with `Y_1(0) = 1` switch to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPeriodDgp {
    #[serde(default)]
    pub covariates: CovariateLaw,
    /// `kappa` in `u(x) = logistic(kappa' x)`.
    #[serde(default)]
    pub index: Vec<f64>,
    /// `[c0, c...]`: `Pr(D = 1 | x) = logistic(c0 + c' x)`.
    pub propensity: Vec<f64>,
    pub g: [Affine; 2],
    pub h: [Affine; 2],
    pub persuasion: Affine,
    #[serde(default)]
    pub backlash: bool,
    #[serde(default)]
    pub backlash_rate: f64,
    /// Added to `Pr(Y_0 = 1 | D = 1, x)`; nonzero breaks parallel trends.
    #[serde(default)]
    pub trend_violation: f64,
    /// Probability that `Y_0` and `Y_1(0)` share the same uniform draw.
    #[serde(default = "default_persistence")]
    pub persistence: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Potential outcomes behind one simulated unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Potentials {
    pub y0: u8,
    pub y1_untreated: u8,
    pub y1_treated: u8,
}

impl TwoPeriodDgp {
    /// Covariate-free design whose treated arm has joint
    /// `[p00, p01, p10, p11]` over `(Y_1(0), Y_1(1))`.
    pub fn from_treated_joint(joint: [f64; 4], propensity: f64) -> Result<Self> {
        let tau = joint[2] + joint[3];
        if (joint.iter().sum::<f64>() - 1.0).abs() > 1e-12 || joint.iter().any(|&p| p < 0.0) || tau >= 1.0 {
            return Err(Error::InvalidInput(format!("invalid treated joint {joint:?}")));
        }
        let backlash_rate = if tau > 0.0 { joint[2] / tau } else { 0.0 };
        let dgp = TwoPeriodDgp {
            covariates: CovariateLaw::default(),
            index: Vec::new(),
            propensity: vec![crate::stats::logit(propensity)],
            g: [Affine::constant(tau / 2.0), Affine::constant(tau)],
            h: [Affine::constant(0.0), Affine::constant(0.0)],
            persuasion: Affine::constant(joint[1] / (1.0 - tau)),
            backlash: backlash_rate > 0.0,
            backlash_rate,
            trend_violation: 0.0,
            persistence: default_persistence(),
            seed: 0,
        };
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn validate(&self) -> Result<()> {
        self.covariates.validate()?;
        let dim = self.covariates.dim();
        if !self.index.is_empty() && self.index.len() != dim {
            return Err(Error::InvalidInput(format!("index has {} entries, covariates have {dim}", self.index.len())));
        }
        if self.propensity.len() != dim + 1 {
            return Err(Error::InvalidInput(format!(
                "propensity needs {} coefficients, got {}",
                dim + 1,
                self.propensity.len()
            )));
        }
        for t in 0..2 {
            for d in 0..2 {
                let mut r = add_ranges(self.g[t].range(), self.h[d].range());
                if t == 0 && d == 1 {
                    r = (r.0 + self.trend_violation, r.1 + self.trend_violation);
                }
                check_prob(&format!("Pr(Y{t}(0) = 1 | D = {d})"), r)?;
            }
        }
        check_prob("persuasion rate", self.persuasion.range())?;
        check_prob("backlash rate", (self.backlash_rate, self.backlash_rate))?;
        check_prob("persistence", (self.persistence, self.persistence))?;
        Ok(())
    }

    fn u(&self, x: &[f64]) -> f64 {
        if self.index.is_empty() {
            0.5
        } else {
            logistic(dot_index(&self.index, x))
        }
    }

    pub fn propensity_at(&self, x: &[f64]) -> f64 {
        logistic(self.propensity[0] + dot_index(&self.propensity[1..], x))
    }

    fn effective_backlash(&self) -> f64 {
        if self.backlash {
            self.backlash_rate
        } else {
            0.0
        }
    }

    /// `Pr(Y_t(0) = 1 | D = d, x)`.
    pub fn untreated_prob(&self, t: usize, d: usize, x: &[f64]) -> f64 {
        let u = self.u(x);
        let v = if t == 0 && d == 1 { self.trend_violation } else { 0.0 };
        self.g[t].at(u) + self.h[d].at(u) + v
    }

    /// Joint `[p00, p01, p10, p11]` of `(Y_1(0), Y_1(1))` given `D = d, x`.
    pub fn joint(&self, d: usize, x: &[f64]) -> [f64; 4] {
        let tau = self.untreated_prob(1, d, x);
        let theta = self.persuasion.at(self.u(x));
        let b = self.effective_backlash();
        [(1.0 - tau) * (1.0 - theta), (1.0 - tau) * theta, tau * b, tau * (1.0 - b)]
    }

    fn draw_unit<R: Rng>(&self, rng: &mut R) -> (Unit, Potentials) {
        let x = self.covariates.draw(rng);
        let d = rng.random_bool(self.propensity_at(&x)) as usize;
        let u1: f64 = rng.random();
        let u0: f64 = if rng.random_bool(self.persistence) { u1 } else { rng.random() };
        let y1_untreated = (u1 < self.untreated_prob(1, d, &x)) as u8;
        let y0 = (u0 < self.untreated_prob(0, d, &x)) as u8;
        let y1_treated = if y1_untreated == 0 {
            rng.random_bool(self.persuasion.at(self.u(&x))) as u8
        } else {
            1 - rng.random_bool(self.effective_backlash()) as u8
        };
        let y1 = if d == 1 { y1_treated } else { y1_untreated };
        let pot = Potentials {
            y0,
            y1_untreated,
            y1_treated,
        };
        (Unit::new(y0, y1, d as u8).with_x(x), pot)
    }
}

/// Panel and potential outcomes drawn from `rng`.
pub fn gen_two_period_with<R: Rng>(dgp: &TwoPeriodDgp, n: usize, rng: &mut R) -> Result<(TwoPeriodPanel, Vec<Potentials>)> {
    dgp.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let (units, pots): (Vec<Unit>, Vec<Potentials>) = (0..n).map(|_| dgp.draw_unit(rng)).unzip();
    Ok((TwoPeriodPanel::new(units)?, pots))
}

/// Panel drawn with the design's own seed.
pub fn gen_two_period(dgp: &TwoPeriodDgp, n: usize) -> Result<TwoPeriodPanel> {
    let mut rng = rng_for(dgp.seed, 0);
    Ok(gen_two_period_with(dgp, n, &mut rng)?.0)
}

/// Staggered design over periods `0..=horizon`. Adoption follows a
/// multinomial logit with never-treated as the base category; untreated
/// outcomes satisfy `Pr(Y_t(inf) = 1 | S = s, x) = G*(t, x) + H*(s, x)`,
/// and exposure `e = t - s` periods after adoption persuades a share
/// `persuasion[e](x)` of would-be zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaggeredDgp {
    pub horizon: usize,
    #[serde(default)]
    pub covariates: CovariateLaw,
    #[serde(default)]
    pub index: Vec<f64>,
    /// One `[c0, c...]` row per cohort `s = 1..=horizon`.
    pub adoption: Vec<Vec<f64>>,
    /// `G*(t, x)` for `t = 0..=horizon`.
    pub g: Vec<Affine>,
    /// `H*(s, x)` for `s = 1..=horizon`, then the never-treated group.
    pub h: Vec<Affine>,
    /// Persuasion rate by event time `e = 0..horizon`.
    pub persuasion: Vec<Affine>,
    #[serde(default)]
    pub backlash: bool,
    #[serde(default)]
    pub backlash_rate: f64,
    /// Added to adopters' untreated probability before `s - 1`.
    #[serde(default)]
    pub pretrend_violation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl StaggeredDgp {
    pub fn validate(&self) -> Result<()> {
        self.covariates.validate()?;
        let t = self.horizon;
        let dim = self.covariates.dim();
        if t == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if self.adoption.len() != t || self.adoption.iter().any(|c| c.len() != dim + 1) {
            return Err(Error::InvalidInput(format!("adoption needs {t} rows of {} coefficients", dim + 1)));
        }
        if self.g.len() != t + 1 || self.h.len() != t + 1 || self.persuasion.len() != t {
            return Err(Error::InvalidInput(format!(
                "need {} G* terms, {} H* terms and {t} persuasion rates",
                t + 1,
                t + 1
            )));
        }
        if !self.index.is_empty() && self.index.len() != dim {
            return Err(Error::InvalidInput("index length does not match covariates".into()));
        }
        for (ti, g) in self.g.iter().enumerate() {
            for (si, h) in self.h.iter().enumerate() {
                let mut r = add_ranges(g.range(), h.range());
                if si < t && ti + 2 <= si + 1 {
                    r = (r.0 + self.pretrend_violation, r.1 + self.pretrend_violation);
                }
                check_prob(&format!("Pr(Y{ti}(inf) = 1 | group {si})"), r)?;
            }
        }
        for p in &self.persuasion {
            check_prob("persuasion rate", p.range())?;
        }
        check_prob("backlash rate", (self.backlash_rate, self.backlash_rate))?;
        Ok(())
    }

    fn u(&self, x: &[f64]) -> f64 {
        if self.index.is_empty() {
            0.5
        } else {
            logistic(dot_index(&self.index, x))
        }
    }

    /// Adoption probabilities for `s = 1..=horizon`, then never-treated.
    pub fn adoption_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut e: Vec<f64> = self
            .adoption
            .iter()
            .map(|c| (c[0] + dot_index(&c[1..], x)).exp())
            .collect();
        e.push(1.0);
        let total: f64 = e.iter().sum();
        e.iter().map(|v| v / total).collect()
    }

    /// `Pr(Y_t(inf) = 1 | S = s, x)`; `s = None` is never-treated.
    pub fn untreated_prob(&self, t: usize, s: Option<usize>, x: &[f64]) -> f64 {
        let u = self.u(x);
        let (hi, v) = match s {
            Some(s) => (s - 1, if t + 1 < s { self.pretrend_violation } else { 0.0 }),
            None => (self.horizon, 0.0),
        };
        self.g[t].at(u) + self.h[hi].at(u) + v
    }

    fn effective_backlash(&self) -> f64 {
        if self.backlash {
            self.backlash_rate
        } else {
            0.0
        }
    }

    fn draw_unit<R: Rng>(&self, rng: &mut R) -> StaggeredUnit {
        let x = self.covariates.draw(rng);
        let probs = self.adoption_probs(&x);
        let k = WeightedIndex::new(&probs).expect("positive weights").sample(rng);
        let s = (k < self.horizon).then_some(k + 1);
        let u = self.u(&x);
        let y = (0..=self.horizon)
            .map(|t| {
                let untreated = rng.random_bool(self.untreated_prob(t, s, &x)) as u8;
                match s {
                    Some(s) if t >= s => {
                        if untreated == 0 {
                            rng.random_bool(self.persuasion[t - s].at(u)) as u8
                        } else {
                            1 - rng.random_bool(self.effective_backlash()) as u8
                        }
                    }
                    _ => untreated,
                }
            })
            .collect();
        StaggeredUnit {
            y,
            s,
            x,
            cluster: None,
        }
    }
}

pub fn gen_staggered_with<R: Rng>(dgp: &StaggeredDgp, n: usize, rng: &mut R) -> Result<StaggeredPanel> {
    dgp.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let units = (0..n).map(|_| dgp.draw_unit(rng)).collect();
    StaggeredPanel::new(units, dgp.horizon)
}

pub fn gen_staggered(dgp: &StaggeredDgp, n: usize) -> Result<StaggeredPanel> {
    gen_staggered_with(dgp, n, &mut rng_for(dgp.seed, 0))
}

/// Either kind of design, tagged for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dgp {
    TwoPeriod(TwoPeriodDgp),
    Staggered(StaggeredDgp),
}

/// Population value of `theta(s, s + j)` for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOracle {
    pub s: usize,
    pub j: i64,
    /// Persuasion rate among cohort `s` at `s + j` (zero before adoption).
    pub theta: f64,
    /// Value the pairwise estimators converge to.
    pub identified: f64,
    pub num: f64,
    pub den: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OracleValues {
    pub theta: Option<f64>,
    pub rtheta: Option<f64>,
    pub att: Option<f64>,
    pub theta_l: Option<f64>,
    pub rtheta_l: Option<f64>,
    /// `Pr(Y_1 = 0 | D = 1)`.
    pub q: Option<f64>,
    pub pairwise: Vec<PairOracle>,
    /// Identified ESPR by horizon.
    pub espr: BTreeMap<i64, f64>,
}

impl OracleValues {
    /// The value an estimator of `target` converges to.
    pub fn identified(&self, target: Target) -> Option<f64> {
        match target {
            Target::Aprt => self.theta_l,
            Target::Raprt => self.rtheta_l,
        }
    }
}

pub fn oracle(dgp: &Dgp) -> Result<OracleValues> {
    match dgp {
        Dgp::TwoPeriod(d) => oracle_two_period(d),
        Dgp::Staggered(d) => oracle_staggered(d),
    }
}

pub fn oracle_two_period(dgp: &TwoPeriodDgp) -> Result<OracleValues> {
    dgp.validate()?;
    let (mut mass, mut p01, mut att, mut untreated_zero, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (w, x) in dgp.covariates.nodes()? {
        let wp = w * dgp.propensity_at(&x);
        let j = dgp.joint(1, &x);
        mass += wp;
        p01 += wp * j[1];
        att += wp * (j[1] - j[2]);
        untreated_zero += wp * (j[0] + j[1]);
        y1 += wp * (j[1] + j[3]);
    }
    let (p01, att, uz, y1) = (p01 / mass, att / mass, untreated_zero / mass, y1 / mass);
    Ok(OracleValues {
        theta: Some(p01 / uz),
        rtheta: Some(p01 / y1),
        att: Some(att),
        theta_l: Some(att / uz),
        rtheta_l: Some(att / y1),
        q: Some(1.0 - y1),
        ..Default::default()
    })
}

pub fn oracle_staggered(dgp: &StaggeredDgp) -> Result<OracleValues> {
    dgp.validate()?;
    let t_max = dgp.horizon;
    let groups = t_max + 1;
    // share[g], mean_y[g][t] = E[Y_t | group g], persuaded[g][t] = E[Y_t(s) - Y_t(inf) | g]
    let mut share = vec![0.0; groups];
    let mut mean_y = vec![vec![0.0; t_max + 1]; groups];
    let mut persuaded = vec![vec![0.0; t_max + 1]; groups];
    let mut switchers = vec![vec![0.0; t_max + 1]; groups];
    let b = dgp.effective_backlash();
    for (w, x) in dgp.covariates.nodes()? {
        let probs = dgp.adoption_probs(&x);
        let u = dgp.u(&x);
        for g in 0..groups {
            let s = (g < t_max).then_some(g + 1);
            let wg = w * probs[g];
            share[g] += wg;
            for t in 0..=t_max {
                let tau = dgp.untreated_prob(t, s, &x);
                let (up, down) = match s {
                    Some(s) if t >= s => ((1.0 - tau) * dgp.persuasion[t - s].at(u), tau * b),
                    _ => (0.0, 0.0),
                };
                mean_y[g][t] += wg * (tau + up - down);
                persuaded[g][t] += wg * up;
                switchers[g][t] += wg * (up - down);
            }
        }
    }
    for g in 0..groups {
        for t in 0..=t_max {
            mean_y[g][t] /= share[g];
            persuaded[g][t] /= share[g];
            switchers[g][t] /= share[g];
        }
    }
    let never = t_max;
    let mut pairwise = Vec::new();
    let mut espr_parts: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for s in 1..=t_max {
        let g = s - 1;
        for j in -(s as i64)..=(t_max as i64 - s as i64) {
            let t = (s as i64 + j) as usize;
            let r = s - 1;
            let num = (mean_y[g][t] - mean_y[g][r]) - (mean_y[never][t] - mean_y[never][r]);
            let den = 1.0 - mean_y[g][r] - (mean_y[never][t] - mean_y[never][r]);
            let untreated_one = mean_y[g][t] - switchers[g][t];
            let theta = persuaded[g][t] / (1.0 - untreated_one);
            pairwise.push(PairOracle {
                s,
                j,
                theta,
                identified: num / den,
                num,
                den,
            });
            let e = espr_parts.entry(j).or_insert((0.0, 0.0));
            e.0 += share[g] * num;
            e.1 += share[g] * den;
        }
    }
    Ok(OracleValues {
        pairwise,
        espr: espr_parts.into_iter().map(|(j, (a, b))| (j, a / b)).collect(),
        ..Default::default()
    })
}

/// What to estimate in each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorSpec {
    Fe {
        target: Target,
    },
    Gmm {
        target: Target,
    },
    Semipar {
        estimator: Estimator,
        target: Target,
        #[serde(default = "default_method")]
        method: NuisanceMethod,
        #[serde(default)]
        link: Link,
        #[serde(default)]
        folds: Option<usize>,
    },
    Espr {
        j: i64,
        #[serde(default)]
        estimator: StaggeredEstimator,
        #[serde(default = "default_method")]
        method: NuisanceMethod,
    },
}

fn default_method() -> NuisanceMethod {
    NuisanceMethod::CellMeans
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Fe { target } => format!("fe_{}", target.label()),
            EstimatorSpec::Gmm { target } => format!("gmm_{}", target.label()),
            EstimatorSpec::Semipar { estimator, target, .. } => format!("{}_{}", estimator.label(), target.label()),
            EstimatorSpec::Espr { j, estimator, .. } => format!("espr_{estimator:?}_{j}").to_lowercase(),
        }
    }

    /// Population value this estimator converges to under `dgp`.
    pub fn truth(&self, oracle: &OracleValues) -> Result<f64> {
        let missing = || Error::InvalidInput(format!("oracle has no value for {}", self.label()));
        match self {
            EstimatorSpec::Fe { target } | EstimatorSpec::Gmm { target } | EstimatorSpec::Semipar { target, .. } => {
                oracle.identified(*target).ok_or_else(missing)
            }
            EstimatorSpec::Espr { j, .. } => oracle.espr.get(j).copied().ok_or_else(missing),
        }
    }

    /// `(point, se)` on one simulated sample.
    pub fn run<R: Rng>(&self, dgp: &Dgp, n: usize, alpha: f64, rng: &mut R) -> Result<(f64, f64)> {
        match (self, dgp) {
            (EstimatorSpec::Fe { target }, Dgp::TwoPeriod(d)) => {
                let (panel, _) = gen_two_period_with(d, n, rng)?;
                let r = rate_from_fe(&fit_two_way_fe(&panel)?, &panel, *target, alpha)?;
                Ok((r.point, r.se))
            }
            (EstimatorSpec::Gmm { target }, Dgp::TwoPeriod(d)) => {
                let (panel, _) = gen_two_period_with(d, n, rng)?;
                let r = gmm_iv(&panel, *target, alpha)?;
                Ok((r.point, r.se))
            }
            (
                EstimatorSpec::Semipar {
                    estimator,
                    target,
                    method,
                    link,
                    folds,
                },
                Dgp::TwoPeriod(d),
            ) => {
                let (panel, _) = gen_two_period_with(d, n, rng)?;
                let mut cfg = NuisanceConfig::new(*method);
                if let Some(k) = folds {
                    cfg = cfg.cross_fit(*k, rng.random());
                }
                let fit = fit_nuisance(&panel, &cfg)?;
                let r = estimate(&panel, &fit, *estimator, *target, alpha, *link)?;
                Ok((r.point, r.se))
            }
            (EstimatorSpec::Espr { j, estimator, method }, Dgp::Staggered(d)) => {
                let panel = gen_staggered_with(d, n, rng)?;
                let cfg = NuisanceConfig::new(*method);
                let r = espr(&panel, *j, *estimator, Some(&cfg), alpha)?;
                Ok((r.theta, r.se))
            }
            _ => Err(Error::InvalidInput(format!(
                "estimator {} does not apply to this design",
                self.label()
            ))),
        }
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub point: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub level: f64,
    pub reps: usize,
    pub failures: usize,
    /// Monte Carlo standard error of the mean, `sd / sqrt(successes)`.
    pub mc_se: f64,
}

/// Run `reps` replications of `f` in parallel; replication `r` draws from
/// stream `r + 1` of `seed`.
pub fn monte_carlo_with<F>(truth: f64, reps: usize, seed: u64, alpha: f64, f: F) -> Result<(MonteCarloSummary, Vec<Replication>)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<(f64, f64)> + Sync,
{
    if reps < 2 {
        return Err(Error::InvalidInput(format!("reps must be at least 2, got {reps}")));
    }
    let z = two_sided_z(alpha);
    let rows: Vec<Replication> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_for(seed, rep as u64 + 1);
            match f(&mut rng) {
                Ok((point, se)) => Replication {
                    rep,
                    point: Some(point),
                    se: Some(se),
                    covered: Some((point - truth).abs() <= z * se),
                    error: None,
                },
                Err(e) => Replication {
                    rep,
                    point: None,
                    se: None,
                    covered: None,
                    error: Some(e.code().to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&Replication> = rows.iter().filter(|r| r.error.is_none()).collect();
    let m = ok.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("only {m} of {reps} replications succeeded")));
    }
    let mf = m as f64;
    let points: Vec<f64> = ok.iter().map(|r| r.point.unwrap()).collect();
    let mean = points.iter().sum::<f64>() / mf;
    let sd = crate::stats::sample_sd(&points);
    let rmse = (points.iter().map(|p| (p - truth).powi(2)).sum::<f64>() / mf).sqrt();
    let mean_se = ok.iter().map(|r| r.se.unwrap()).sum::<f64>() / mf;
    let coverage = ok.iter().filter(|r| r.covered == Some(true)).count() as f64 / mf;
    let summary = MonteCarloSummary {
        truth,
        mean,
        bias: mean - truth,
        sd,
        rmse,
        mean_se,
        coverage,
        level: 1.0 - alpha,
        reps,
        failures: reps - m,
        mc_se: sd / mf.sqrt(),
    };
    Ok((summary, rows))
}

/// Monte Carlo study of one estimator against the design's oracle.
pub fn monte_carlo(
    dgp: &Dgp,
    spec: &EstimatorSpec,
    n: usize,
    reps: usize,
    seed: u64,
    alpha: f64,
) -> Result<(MonteCarloSummary, Vec<Replication>)> {
    let truth = spec.truth(&oracle(dgp)?)?;
    monte_carlo_with(truth, reps, seed, alpha, |rng| spec.run(dgp, n, alpha, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_hermite_moments() {
        let (z, w) = gauss_hermite(GH_NODES);
        let sp = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        assert!((m0 - sp).abs() < 1e-12);
        assert!((m2 - sp / 2.0).abs() < 1e-12);
        assert!((m4 - 0.75 * sp).abs() < 1e-11);
    }

    #[test]
    fn joint_oracles() {
        let o = oracle_two_period(&TwoPeriodDgp::from_treated_joint([0.3, 0.4, 0.0, 0.3], 0.4).unwrap()).unwrap();
        assert!((o.theta.unwrap() - 0.4 / 0.7).abs() < 1e-12);
        assert!((o.rtheta.unwrap() - 0.4 / 0.7).abs() < 1e-12);
        assert!((o.att.unwrap() - 0.4).abs() < 1e-12);
        let o = oracle_two_period(&TwoPeriodDgp::from_treated_joint([0.3, 0.4, 0.1, 0.2], 0.4).unwrap()).unwrap();
        assert!((o.theta.unwrap() - 0.571_428_571_428_571_4).abs() < 1e-12);
        assert!((o.theta_l.unwrap() - 0.428_571_428_571_428_6).abs() < 1e-12);
        let o = oracle_two_period(&TwoPeriodDgp::from_treated_joint([0.6, 0.0, 0.0, 0.4], 0.4).unwrap()).unwrap();
        assert_eq!(o.theta_l.unwrap(), 0.0);
    }

    #[test]
    fn rejects_binding_clip() {
        let mut d = TwoPeriodDgp::from_treated_joint([0.3, 0.4, 0.0, 0.3], 0.4).unwrap();
        d.h[1] = Affine { intercept: 0.0, slope: 0.9 };
        assert_eq!(d.validate().unwrap_err().code(), "INVALID_INPUT");
    }

    #[test]
    fn deterministic_panels() {
        let d = TwoPeriodDgp::from_treated_joint([0.3, 0.4, 0.1, 0.2], 0.4).unwrap();
        assert_eq!(gen_two_period(&d, 200).unwrap(), gen_two_period(&d, 200).unwrap());
    }

    #[test]
    fn reproducible_summary() {
        let dgp = Dgp::TwoPeriod(TwoPeriodDgp::from_treated_joint([0.3, 0.4, 0.0, 0.3], 0.4).unwrap());
        let spec = EstimatorSpec::Fe { target: Target::Aprt };
        let a = monte_carlo(&dgp, &spec, 300, 2, 9, 0.05).unwrap();
        let b = monte_carlo(&dgp, &spec, 300, 2, 9, 0.05).unwrap();
        assert_eq!(a, b);
        assert!(monte_carlo(&dgp, &spec, 300, 1, 9, 0.05).is_err());
    }

    #[test]
    fn staggered_oracle_without_violation() {
        let dgp = StaggeredDgp {
            horizon: 2,
            covariates: CovariateLaw::default(),
            index: Vec::new(),
            adoption: vec![vec![0.0], vec![0.0]],
            g: vec![Affine::constant(0.2), Affine::constant(0.25), Affine::constant(0.3)],
            h: vec![Affine::constant(0.1), Affine::constant(0.05), Affine::constant(0.0)],
            persuasion: vec![Affine::constant(0.3), Affine::constant(0.4)],
            backlash: false,
            backlash_rate: 0.0,
            pretrend_violation: 0.0,
            seed: 1,
        };
        let o = oracle_staggered(&dgp).unwrap();
        for p in &o.pairwise {
            assert!((p.theta - p.identified).abs() < 1e-12, "{p:?}");
            if p.j < 0 {
                assert!(p.num.abs() < 1e-12);
            }
        }
        assert!((o.espr[&0] - 0.3).abs() < 1e-12);
        assert!((o.espr[&1] - 0.4).abs() < 1e-12);
    }
}

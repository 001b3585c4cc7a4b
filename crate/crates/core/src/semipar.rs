//! Covariate-adjusted estimators of the persuasion rates: DID plug-in,
//! direct plug-in (PI), propensity-odds weighting (POW) and doubly robust (DR),
//! all with influence-function standard errors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::TwoPeriodPanel;
use crate::error::{guard_denominator, Error, Result};
use crate::nuisance::{fit_logistic, fit_nuisance, NuisanceConfig, NuisanceFit, NuisanceMethod, NuisanceValues};
use crate::report::{EstimateReport, Target};
use crate::stats::{influence_variance, logistic, logit, normal_cdf};

/// Scale on which parallel trends are imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Link {
    #[default]
    Identity,
    Logit,
    Exponential,
}

impl std::str::FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            "exponential" | "exp" => Ok(Link::Exponential),
            other => Err(Error::InvalidInput(format!("unknown link `{other}`"))),
        }
    }
}

impl Link {
    fn forward(self, p: f64) -> Result<f64> {
        match self {
            Link::Identity => Ok(p),
            Link::Logit if p > 0.0 && p < 1.0 => Ok(logit(p)),
            Link::Exponential if (0.0..1.0).contains(&p) => Ok(-(-p).ln_1p()),
            _ => Err(Error::LinkDomain(format!("{self:?} link at probability {p}"))),
        }
    }

    fn inverse(self, s: f64) -> Result<f64> {
        match self {
            Link::Identity => Ok(s),
            Link::Logit => Ok(logistic(s)),
            Link::Exponential if s >= 0.0 => Ok(-(-s).exp_m1()),
            Link::Exponential => Err(Error::LinkDomain(format!(
                "exponential link composed index {s} is negative"
            ))),
        }
    }

    /// `d Lambda(p) / dp`.
    fn forward_slope(self, p: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => 1.0 / (p * (1.0 - p)),
            Link::Exponential => 1.0 / (1.0 - p),
        }
    }

    /// `d Lambda^{-1}(s) / ds` written in terms of `psi = Lambda^{-1}(s)`.
    fn inverse_slope(self, psi: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => psi * (1.0 - psi),
            Link::Exponential => 1.0 - psi,
        }
    }
}

/// Counterfactual treated-arm probability and its partial derivatives in
/// `(Pi_0(1), Pi_1(0), Pi_0(0))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiValue {
    /// Unclipped value.
    pub raw: f64,
    pub grad: [f64; 3],
}

impl PsiValue {
    pub fn clipped(&self) -> f64 {
        self.raw.clamp(0.0, 1.0)
    }
}

/// `Lambda^{-1}[Lambda(pi0_1) + Lambda(pi1_0) - Lambda(pi0_0)]`.
pub fn psi_from_probs(link: Link, pi0_1: f64, pi1_0: f64, pi0_0: f64) -> Result<PsiValue> {
    let s = link.forward(pi0_1)? + link.forward(pi1_0)? - link.forward(pi0_0)?;
    let raw = link.inverse(s)?;
    let k = link.inverse_slope(raw);
    Ok(PsiValue {
        raw,
        grad: [
            k * link.forward_slope(pi0_1),
            k * link.forward_slope(pi1_0),
            -k * link.forward_slope(pi0_0),
        ],
    })
}

/// Evaluates the counterfactual probability from a nuisance fit.
#[derive(Debug, Clone, Copy)]
pub struct PsiEvaluator<'a> {
    pub link: Link,
    pub fit: &'a NuisanceFit,
}

impl<'a> PsiEvaluator<'a> {
    pub fn new(link: Link, fit: &'a NuisanceFit) -> Self {
        PsiEvaluator { link, fit }
    }

    /// Value at covariates `x` from the full-sample models, clipped to `[0, 1]`.
    pub fn psi(&self, x: &[f64]) -> Result<f64> {
        let f = self.fit;
        Ok(psi_from_probs(
            self.link,
            f.predict_pi(0, 1, x)?,
            f.predict_pi(1, 0, x)?,
            f.predict_pi(0, 0, x)?,
        )?
        .clipped())
    }

    /// Value at unit `i` from the stored (possibly out-of-fold) nuisance values.
    pub fn at_unit(&self, i: usize) -> Result<PsiValue> {
        let v = &self.fit.values;
        psi_from_probs(self.link, v.pi[0][1][i], v.pi[1][0][i], v.pi[0][0][i])
    }
}

/// `Psi` at covariates `x`, clipped to `[0, 1]`.
pub fn psi(evaluator: &PsiEvaluator, x: &[f64]) -> Result<f64> {
    evaluator.psi(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Estimator {
    Did,
    Pi,
    Pow,
    Dr,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Did, Estimator::Pi, Estimator::Pow, Estimator::Dr];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Did => "did",
            Estimator::Pi => "pi",
            Estimator::Pow => "pow",
            Estimator::Dr => "dr",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "did" => Ok(Estimator::Did),
            "pi" => Ok(Estimator::Pi),
            "pow" => Ok(Estimator::Pow),
            "dr" => Ok(Estimator::Dr),
            other => Err(Error::InvalidInput(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Per-unit influence-function building blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EifTerms {
    pub h_pow_num: Vec<f64>,
    pub h_pow_den: Vec<f64>,
    pub h_pow_adj: Vec<f64>,
    pub h_pi_num: Vec<f64>,
    pub h_pi_den: Vec<f64>,
    pub h_pi_adj: Vec<f64>,
}

struct Obs {
    d: Vec<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
}

impl Obs {
    fn new(panel: &TwoPeriodPanel) -> Self {
        let u = panel.units();
        Obs {
            d: u.iter().map(|u| u.d as f64).collect(),
            y0: u.iter().map(|u| u.y0 as f64).collect(),
            y1: u.iter().map(|u| u.y1 as f64).collect(),
        }
    }
}

fn check_lengths(panel: &TwoPeriodPanel, values: &NuisanceValues) -> Result<()> {
    if values.n() != panel.n() {
        return Err(Error::InvalidInput(format!(
            "nuisance values cover {} units, panel has {}",
            values.n(),
            panel.n()
        )));
    }
    Ok(())
}

/// Building blocks from observed data and arbitrary nuisance values.
pub fn eif_terms(panel: &TwoPeriodPanel, values: &NuisanceValues) -> Result<EifTerms> {
    check_lengths(panel, values)?;
    let o = Obs::new(panel);
    let n = panel.n();
    let mut t = EifTerms {
        h_pow_num: Vec::with_capacity(n),
        h_pow_den: Vec::with_capacity(n),
        h_pow_adj: Vec::with_capacity(n),
        h_pi_num: Vec::with_capacity(n),
        h_pi_den: Vec::with_capacity(n),
        h_pi_adj: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (d, y0) = (o.d[i], o.y0[i]);
        let dy = o.y1[i] - y0;
        let w = values.odds(i);
        let delta0 = values.delta0(i);
        t.h_pow_num.push(d * dy - w * (1.0 - d) * dy);
        t.h_pow_den.push(d * (1.0 - y0) - w * (1.0 - d) * dy);
        t.h_pow_adj.push(-(d - w * (1.0 - d)) * delta0);
        t.h_pi_num.push(d * (dy - delta0));
        t.h_pi_den.push(d * (1.0 - y0 - delta0));
        t.h_pi_adj.push(-w * (1.0 - d) * (dy - delta0));
    }
    Ok(t)
}

impl EifTerms {
    /// Efficient numerator and APRT-denominator contributions.
    fn efficient(&self) -> (Vec<f64>, Vec<f64>) {
        let num = self.h_pi_num.iter().zip(&self.h_pi_adj).map(|(a, b)| a + b).collect();
        let den = self.h_pi_den.iter().zip(&self.h_pi_adj).map(|(a, b)| a + b).collect();
        (num, den)
    }

    pub fn write_csv<W: Write>(&self, out: W, f: &[f64], f_r: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "unit", "h_pow_num", "h_pow_den", "h_pow_adj", "h_pi_num", "h_pi_den", "h_pi_adj", "f_did", "f_did_r",
        ])?;
        for i in 0..self.h_pi_num.len() {
            w.write_record(&[
                i.to_string(),
                self.h_pow_num[i].to_string(),
                self.h_pow_den[i].to_string(),
                self.h_pow_adj[i].to_string(),
                self.h_pi_num[i].to_string(),
                self.h_pi_den[i].to_string(),
                self.h_pi_adj[i].to_string(),
                f[i].to_string(),
                f_r[i].to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<eif dump>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Per-unit efficient contributions `(num_i, den_i)` whose means identify the
/// numerator and the target's denominator. Under a non-identity link the
/// correction terms carry the partial derivatives of `Psi`.
fn efficient_contributions(
    panel: &TwoPeriodPanel,
    fit: &NuisanceFit,
    target: Target,
    link: Link,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(panel, &fit.values)?;
    let o = Obs::new(panel);
    let (num, den) = if link == Link::Identity {
        eif_terms(panel, &fit.values)?.efficient()
    } else {
        let v = &fit.values;
        let eval = PsiEvaluator::new(link, fit);
        let mut num = Vec::with_capacity(panel.n());
        let mut den = Vec::with_capacity(panel.n());
        for i in 0..panel.n() {
            let (d, y0, y1) = (o.d[i], o.y0[i], o.y1[i]);
            let psi = eval.at_unit(i)?;
            let [ga, gb, gc] = psi.grad;
            let w = v.odds(i);
            let m = d * psi.raw
                + d * ga * (y0 - v.pi[0][1][i])
                + w * (1.0 - d) * (gb * (y1 - v.pi[1][0][i]) + gc * (y0 - v.pi[0][0][i]));
            num.push(d * y1 - m);
            den.push(d - m);
        }
        (num, den)
    };
    let den = match target {
        Target::Aprt => den,
        Target::Raprt => o.d.iter().zip(&o.y1).map(|(d, y)| d * y).collect(),
    };
    Ok((num, den))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Influence values `F_i` at `point`.
fn influence(num: &[f64], den: &[f64], point: f64) -> Result<Vec<f64>> {
    let scale = mean(den);
    guard_denominator(scale, "influence-function denominator")?;
    Ok(num.iter().zip(den).map(|(a, b)| (a - point * b) / scale).collect())
}

fn se_from_influence(panel: &TwoPeriodPanel, f: &[f64]) -> f64 {
    let (cl, g) = panel.cluster_index();
    influence_variance(f, &cl, g, panel.has_clusters()).sqrt()
}

/// Influence values for the target at `point`, identity link.
pub fn influence_values(panel: &TwoPeriodPanel, fit: &NuisanceFit, point: f64, target: Target) -> Result<Vec<f64>> {
    influence_values_link(panel, fit, point, target, Link::Identity)
}

pub fn influence_values_link(
    panel: &TwoPeriodPanel,
    fit: &NuisanceFit,
    point: f64,
    target: Target,
    link: Link,
) -> Result<Vec<f64>> {
    let (num, den) = efficient_contributions(panel, fit, target, link)?;
    influence(&num, &den, point)
}

/// `sqrt(mean(F^2) / n)`, summing `F` within clusters when the panel has them.
pub fn eif_se(panel: &TwoPeriodPanel, fit: &NuisanceFit, point: f64, target: Target) -> Result<f64> {
    let f = influence_values(panel, fit, point, target)?;
    Ok(se_from_influence(panel, &f))
}

fn point_parts(
    panel: &TwoPeriodPanel,
    fit: &NuisanceFit,
    estimator: Estimator,
    target: Target,
    link: Link,
) -> Result<(f64, f64, usize)> {
    check_lengths(panel, &fit.values)?;
    if link != Link::Identity && estimator != Estimator::Did {
        return Err(Error::UnsupportedLink(format!(
            "{:?} link is only available for the DID estimator",
            link
        )));
    }
    let o = Obs::new(panel);
    let v = &fit.values;
    let n = panel.n();
    let treated_y1 = (0..n).map(|i| o.d[i] * o.y1[i]).sum::<f64>();
    let mut clipped = 0usize;
    let (num, den_aprt) = match estimator {
        Estimator::Did => {
            let eval = PsiEvaluator::new(link, fit);
            let (mut num, mut den, mut pi11) = (0.0, 0.0, 0.0);
            for i in 0..n {
                if o.d[i] == 0.0 {
                    continue;
                }
                let psi = eval.at_unit(i)?.raw;
                if !(0.0..=1.0).contains(&psi) {
                    clipped += 1;
                }
                num += v.pi[1][1][i] - psi;
                den += 1.0 - psi;
                pi11 += v.pi[1][1][i];
            }
            if target == Target::Raprt {
                guard_denominator(pi11, "DID R-APRT denominator")?;
                return Ok((num, pi11, clipped));
            }
            (num, den)
        }
        Estimator::Pi => {
            let t = eif_terms(panel, v)?;
            (t.h_pi_num.iter().sum(), t.h_pi_den.iter().sum())
        }
        Estimator::Pow => {
            let t = eif_terms(panel, v)?;
            let nhat = t.h_pow_num.iter().sum::<f64>();
            let untreated_y1 = (0..n).map(|i| o.d[i] * (1.0 - o.y1[i])).sum::<f64>();
            (nhat, nhat + untreated_y1)
        }
        Estimator::Dr => {
            let t = eif_terms(panel, v)?;
            let (num, den) = t.efficient();
            (num.iter().sum(), den.iter().sum())
        }
    };
    let den = match target {
        Target::Aprt => den_aprt,
        Target::Raprt => treated_y1,
    };
    Ok((num, den, clipped))
}

/// Run one estimator under the given link (only DID accepts a non-identity link).
pub fn estimate(
    panel: &TwoPeriodPanel,
    fit: &NuisanceFit,
    estimator: Estimator,
    target: Target,
    alpha: f64,
    link: Link,
) -> Result<EstimateReport> {
    let (num, den, clipped) = point_parts(panel, fit, estimator, target, link)?;
    guard_denominator(den, &format!("{} {} denominator", estimator.label(), target.label()))?;
    let point = num / den;
    let f = influence_values_link(panel, fit, point, target, link)?;
    let se = se_from_influence(panel, &f);
    let n = panel.n() as f64;
    let mut r = EstimateReport::new(target.estimand(), estimator.label(), point, se, alpha, panel.n())
        .with_diagnostic("numerator", num / n)
        .with_diagnostic("denominator", den / n)
        .with_diagnostic("link", link)
        .with_diagnostic("nuisance", &fit.meta)
        .with_diagnostic("clustered", panel.has_clusters());
    if estimator == Estimator::Did && link == Link::Identity {
        r = r.with_diagnostic("psi_clipped", clipped);
        if clipped > 0 {
            r.warn(format!("{clipped} treated units have Psi outside [0, 1]"));
        }
    }
    if fit.meta.trimmed_propensities > 0 && matches!(estimator, Estimator::Pow | Estimator::Dr) {
        r.warn(format!("{} propensities trimmed", fit.meta.trimmed_propensities));
    }
    Ok(r)
}

pub fn estimate_did(panel: &TwoPeriodPanel, fit: &NuisanceFit, target: Target, alpha: f64) -> Result<EstimateReport> {
    estimate(panel, fit, Estimator::Did, target, alpha, Link::Identity)
}

pub fn estimate_pi(panel: &TwoPeriodPanel, fit: &NuisanceFit, target: Target, alpha: f64) -> Result<EstimateReport> {
    estimate(panel, fit, Estimator::Pi, target, alpha, Link::Identity)
}

pub fn estimate_pow(panel: &TwoPeriodPanel, fit: &NuisanceFit, target: Target, alpha: f64) -> Result<EstimateReport> {
    estimate(panel, fit, Estimator::Pow, target, alpha, Link::Identity)
}

pub fn estimate_dr(panel: &TwoPeriodPanel, fit: &NuisanceFit, target: Target, alpha: f64) -> Result<EstimateReport> {
    estimate(panel, fit, Estimator::Dr, target, alpha, Link::Identity)
}

/// Treat the pre-period outcome as a covariate (`Z = [Y0, X]`) and run the
/// chosen estimator. `CONSTANT` is promoted to `CELL_MEANS` since `Z` always
/// carries `Y0`.
pub fn estimate_unconfoundedness_mode(
    panel: &TwoPeriodPanel,
    estimator: Estimator,
    nuisance: &NuisanceConfig,
    target: Target,
    alpha: f64,
) -> Result<EstimateReport> {
    let augmented = panel.augmented_with_y0();
    let mut cfg = nuisance.clone();
    if cfg.method == NuisanceMethod::Constant {
        cfg.method = NuisanceMethod::CellMeans;
    }
    cfg.pi0_is_first_covariate = true;
    let fit = fit_nuisance(&augmented, &cfg)?;
    let r = estimate(&augmented, &fit, estimator, target, alpha, Link::Identity)?;
    Ok(r.with_diagnostic("mode", "UNCONFOUNDEDNESS"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndependenceTest {
    /// Wald z statistic of the `Y0` coefficient.
    pub statistic: f64,
    pub pvalue: f64,
    pub coefficient: f64,
}

/// Wald test of the `Y0` coefficient in a logistic regression of `D` on `(1, X, Y0)`.
pub fn test_y0_independence(panel: &TwoPeriodPanel) -> Result<IndependenceTest> {
    for d in 0..2u8 {
        let k = panel.units().iter().filter(|u| u.d == d).count();
        if k < 2 {
            return Err(Error::InsufficientArm(format!("arm d={d} has {k} units")));
        }
    }
    let rows: Vec<Vec<f64>> = panel
        .units()
        .iter()
        .map(|u| {
            let mut r = u.x.clone();
            r.push(u.y0 as f64);
            r
        })
        .collect();
    let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let d: Vec<f64> = panel.units().iter().map(|u| u.d as f64).collect();
    let fit = fit_logistic(&xs, &d, "D on (1, X, Y0)")?;
    let j = fit.coef.len() - 1;
    let z = fit.coef[j] / fit.std_error(j);
    Ok(IndependenceTest {
        statistic: z,
        pvalue: 2.0 * normal_cdf(-z.abs()),
        coefficient: fit.coef[j],
    })
}

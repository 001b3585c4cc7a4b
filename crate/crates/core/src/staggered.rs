//! Staggered adoption: pairwise persuasion rates against the never-treated
//! group, event-study aggregation (ESPR), and stacked influence-function
//! inference.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{StaggeredPanel, TwoPeriodPanel, Unit};
use crate::error::{guard_denominator, Error, Result};
use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceMethod};
use crate::report::{Estimand, EstimateReport};
use crate::semipar::eif_terms;
use crate::stats::{ols, small_cluster_factor, two_sided_z};
use crate::twoperiod_reg::{fit_two_way_fe, FeCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StaggeredEstimator {
    #[default]
    Regression,
    Dr,
}

impl std::str::FromStr for StaggeredEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" | "reg" | "fe" => Ok(StaggeredEstimator::Regression),
            "dr" => Ok(StaggeredEstimator::Dr),
            other => Err(Error::InvalidInput(format!("unknown staggered estimator `{other}`"))),
        }
    }
}

/// Persuasion rate at `s + j` for cohort `s`, relative to period `s - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTheta {
    pub s: usize,
    pub j: i64,
    pub num: f64,
    pub den: f64,
    pub theta: f64,
    pub se: f64,
    /// Saturated regression coefficients (regression estimator only).
    pub coefficients: Option<FeCoefficients>,
    pub n_cohort: usize,
    pub n_never: usize,
}

fn target_period(panel: &StaggeredPanel, s: usize, j: i64) -> Result<usize> {
    let t = s as i64 + j;
    if s == 0 || s > panel.horizon() || t < 0 || t > panel.horizon() as i64 {
        return Err(Error::HorizonOutOfRange(format!(
            "cohort {s}, horizon {j}: period {t} outside 0..={}",
            panel.horizon()
        )));
    }
    Ok(t as usize)
}

/// Two-period panel for the pair: `y0 = Y_{s-1}`, `y1 = Y_{s+j}`, `d = 1(S = s)`,
/// restricted to `S in {s, never}`. Also returns the original unit indices.
fn pair_panel(panel: &StaggeredPanel, s: usize, j: i64) -> Result<(TwoPeriodPanel, Vec<usize>)> {
    let t = target_period(panel, s, j)?;
    let mut idx = Vec::new();
    let mut units = Vec::new();
    for (i, u) in panel.units().iter().enumerate() {
        let d = match u.s {
            Some(v) if v == s => 1,
            None => 0,
            _ => continue,
        };
        idx.push(i);
        units.push(Unit {
            y0: u.y[s - 1],
            y1: u.y[t],
            d,
            x: u.x.clone(),
            cluster: u.cluster.clone(),
        });
    }
    let n1 = units.iter().filter(|u| u.d == 1).count();
    if n1 == 0 {
        return Err(Error::EmptyGroup(format!("no units adopt at s = {s}")));
    }
    if n1 == units.len() {
        return Err(Error::EmptyGroup("no never-treated units".into()));
    }
    Ok((TwoPeriodPanel::new(units)?, idx))
}

/// Per-unit contributions of one cohort, indexed over the full panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortContribution {
    pub s: usize,
    pub n_cohort: usize,
    pub g_num: Vec<f64>,
    pub g_den: Vec<f64>,
    /// `sum(g_num) / n_cohort` and likewise for the denominator.
    pub theta_num: f64,
    pub theta_den: f64,
}

fn contribution(
    panel: &StaggeredPanel,
    s: usize,
    j: i64,
    estimator: StaggeredEstimator,
    nuisance: Option<&NuisanceConfig>,
) -> Result<CohortContribution> {
    let (pair, idx) = pair_panel(panel, s, j)?;
    let n_cohort = pair.n_treated();
    let cfg = match estimator {
        StaggeredEstimator::Regression => NuisanceConfig::new(NuisanceMethod::Constant),
        StaggeredEstimator::Dr => nuisance
            .cloned()
            .unwrap_or_else(|| NuisanceConfig::new(NuisanceMethod::Logistic)),
    };
    let fit = fit_nuisance(&pair, &cfg)?;
    let terms = eif_terms(&pair, &fit.values)?;
    let mut g_num = vec![0.0; panel.n()];
    let mut g_den = vec![0.0; panel.n()];
    for (k, &i) in idx.iter().enumerate() {
        g_num[i] = terms.h_pi_num[k] + terms.h_pi_adj[k];
        g_den[i] = terms.h_pi_den[k] + terms.h_pi_adj[k];
    }
    let theta_num = g_num.iter().sum::<f64>() / n_cohort as f64;
    let theta_den = g_den.iter().sum::<f64>() / n_cohort as f64;
    Ok(CohortContribution {
        s,
        n_cohort,
        g_num,
        g_den,
        theta_num,
        theta_den,
    })
}

/// Saturated regression on `S in {s, never}` and `t in {s - 1, s + j}`.
pub fn pairwise_theta(panel: &StaggeredPanel, s: usize, j: i64) -> Result<PairwiseTheta> {
    let (pair, _) = pair_panel(panel, s, j)?;
    let coef = if j == -1 {
        // Both periods coincide; the regression collapses to group means.
        let mean = |d: u8| {
            let arm: Vec<&Unit> = pair.units().iter().filter(|u| u.d == d).collect();
            arm.iter().map(|u| u.y0 as f64).sum::<f64>() / arm.len() as f64
        };
        let g0 = mean(0);
        FeCoefficients {
            gamma0: g0,
            gamma1: mean(1) - g0,
            gamma2: 0.0,
            gamma: 0.0,
        }
    } else {
        fit_two_way_fe(&pair)?
    };
    let num = coef.gamma;
    let den = coef.aprt_denominator();
    guard_denominator(den, &format!("theta({s}, {s}{j:+}) denominator"))?;
    let c = contribution(panel, s, j, StaggeredEstimator::Regression, None)?;
    let se = single_cohort_se(panel, &c, num / den);
    Ok(PairwiseTheta {
        s,
        j,
        num,
        den,
        theta: num / den,
        se,
        coefficients: Some(coef),
        n_cohort: pair.n_treated(),
        n_never: pair.n() - pair.n_treated(),
    })
}

fn single_cohort_se(panel: &StaggeredPanel, c: &CohortContribution, theta: f64) -> f64 {
    let (cl, g) = panel.cluster_index();
    let n = panel.n() as f64;
    let scale = c.theta_den * c.n_cohort as f64 / n;
    let psi: Vec<f64> = c
        .g_num
        .iter()
        .zip(&c.g_den)
        .map(|(a, b)| (a - theta * b) / scale)
        .collect();
    clustered_mean_variance(&psi, &cl, g).sqrt()
}

fn clustered_mean_variance(psi: &[f64], cl: &[usize], g: usize) -> f64 {
    let n = psi.len() as f64;
    let mut sums = vec![0.0; g];
    for (p, &c) in psi.iter().zip(cl) {
        sums[c] += p;
    }
    sums.iter().map(|s| s * s).sum::<f64>() / (n * n) * small_cluster_factor(g)
}

/// Saturated within-group event-study coefficients, with period `anchor - 1`
/// as the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyCoefficients {
    /// `None` for the never-treated group.
    pub s: Option<usize>,
    pub anchor: usize,
    pub mu_ref: f64,
    /// `alpha_j` keyed by `j = t - anchor`, excluding `j = -1`.
    pub alpha: BTreeMap<i64, f64>,
}

fn group_regression(panel: &StaggeredPanel, group: Option<usize>, anchor: usize) -> Result<EventStudyCoefficients> {
    let members: Vec<&Vec<u8>> = panel
        .units()
        .iter()
        .filter(|u| u.s == group)
        .map(|u| &u.y)
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyGroup(match group {
            Some(s) => format!("no units adopt at s = {s}"),
            None => "no never-treated units".into(),
        }));
    }
    if anchor == 0 || anchor > panel.horizon() {
        return Err(Error::HorizonOutOfRange(format!("anchor {anchor}")));
    }
    let periods = panel.horizon() + 1;
    let reference = anchor - 1;
    let others: Vec<usize> = (0..periods).filter(|&t| t != reference).collect();
    let rows = members.len() * periods;
    let x = DMatrix::from_fn(rows, periods, |r, c| {
        let t = r % periods;
        if c == 0 {
            1.0
        } else {
            (t == others[c - 1]) as u8 as f64
        }
    });
    let y = DVector::from_fn(rows, |r, _| members[r / periods][r % periods] as f64);
    let fit = ols(&x, &y)?;
    let alpha = others
        .iter()
        .enumerate()
        .map(|(k, &t)| (t as i64 - anchor as i64, fit.coef[k + 1]))
        .collect();
    Ok(EventStudyCoefficients {
        s: group,
        anchor,
        mu_ref: fit.coef[0],
        alpha,
    })
}

/// Within-cohort regression of `Y_t` on period dummies, reference `s - 1`.
pub fn event_study_regression(panel: &StaggeredPanel, s: usize) -> Result<EventStudyCoefficients> {
    group_regression(panel, Some(s), s)
}

/// Never-treated regression with the reference period `s - 1` of cohort `s`.
pub fn control_event_study(panel: &StaggeredPanel, s: usize) -> Result<EventStudyCoefficients> {
    group_regression(panel, None, s)
}

/// `theta(s, s + j)` assembled from the two event-study regressions.
pub fn theta_from_event_study(cohort: &EventStudyCoefficients, control: &EventStudyCoefficients, j: i64) -> Result<(f64, f64)> {
    let a_s = if j == -1 { 0.0 } else { lookup(cohort, j)? };
    let a_inf = if j == -1 { 0.0 } else { lookup(control, j)? };
    Ok((a_s - a_inf, 1.0 - cohort.mu_ref - a_inf))
}

fn lookup(c: &EventStudyCoefficients, j: i64) -> Result<f64> {
    c.alpha
        .get(&j)
        .copied()
        .ok_or_else(|| Error::HorizonOutOfRange(format!("no coefficient for j = {j}")))
}

/// Stacked influence-function inference for the ratio of aggregated sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedInference {
    pub se: f64,
    /// Covariance of the stacked contributions `Q_i = (G_num, G_den, H)`.
    pub covariance: Vec<Vec<f64>>,
    /// Asymptotic covariance of the aggregated (numerator, denominator), divided by n.
    pub num_den_covariance: [[f64; 2]; 2],
}

/// `J P Sigma P' J' / n` with `Sigma` the clustered second moment of
/// `Q_i = [(g_num - 1(S=s) theta_num) / p_s, (g_den - 1(S=s) theta_den) / p_s, 1(S=s) - p_s]`.
pub fn stacked_inference(panel: &StaggeredPanel, components: &[CohortContribution]) -> Result<StackedInference> {
    let n = panel.n();
    let nf = n as f64;
    let m = components.len();
    if m == 0 {
        return Err(Error::SingularSigma);
    }
    let p: Vec<f64> = components.iter().map(|c| c.n_cohort as f64 / nf).collect();
    let (cl, g) = panel.cluster_index();
    let in_cohort = |i: usize, s: usize| (panel.units()[i].s == Some(s)) as u8 as f64;

    // Cluster sums of Q.
    let mut sums = DMatrix::<f64>::zeros(g, 3 * m);
    for i in 0..n {
        for (k, c) in components.iter().enumerate() {
            let ind = in_cohort(i, c.s);
            sums[(cl[i], k)] += (c.g_num[i] - ind * c.theta_num) / p[k];
            sums[(cl[i], m + k)] += (c.g_den[i] - ind * c.theta_den) / p[k];
            sums[(cl[i], 2 * m + k)] += ind - p[k];
        }
    }
    let sigma = sums.transpose() * &sums / nf * small_cluster_factor(g);
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSigma);
    }
    let mut pm = DMatrix::<f64>::zeros(2, 3 * m);
    for k in 0..m {
        pm[(0, k)] = p[k];
        pm[(1, m + k)] = p[k];
        pm[(0, 2 * m + k)] = components[k].theta_num;
        pm[(1, 2 * m + k)] = components[k].theta_den;
    }
    let a_num: f64 = (0..m).map(|k| p[k] * components[k].theta_num).sum();
    let a_den: f64 = (0..m).map(|k| p[k] * components[k].theta_den).sum();
    guard_denominator(a_den, "ESPR denominator")?;
    let inner = &pm * &sigma * pm.transpose() / nf;
    let jv = DVector::from_vec(vec![1.0 / a_den, -a_num / (a_den * a_den)]);
    let var = (jv.transpose() * &inner * &jv)[(0, 0)];
    if !var.is_finite() || var < 0.0 {
        return Err(Error::SingularSigma);
    }
    Ok(StackedInference {
        se: var.sqrt(),
        covariance: (0..3 * m)
            .map(|r| (0..3 * m).map(|c| sigma[(r, c)]).collect())
            .collect(),
        num_den_covariance: [[inner[(0, 0)], inner[(0, 1)]], [inner[(1, 0)], inner[(1, 1)]]],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsprReport {
    pub j: i64,
    pub estimator: StaggeredEstimator,
    pub theta: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub level: f64,
    /// `(s, p_s)` for retained cohorts.
    pub weights: Vec<(usize, f64)>,
    pub numerator: f64,
    pub denominator: f64,
    pub components: Vec<PairwiseTheta>,
    pub pretrend: bool,
    pub n: usize,
    pub warnings: Vec<String>,
}

impl EsprReport {
    pub fn to_estimate_report(&self) -> EstimateReport {
        let mut r = EstimateReport::new(
            Estimand::Espr,
            match self.estimator {
                StaggeredEstimator::Regression => "espr_regression",
                StaggeredEstimator::Dr => "espr_dr",
            },
            self.theta,
            self.se,
            1.0 - self.level,
            self.n,
        )
        .with_diagnostic("j", self.j)
        .with_diagnostic("pretrend", self.pretrend);
        r.warnings.extend(self.warnings.iter().cloned());
        r
    }
}

/// Event-study persuasion rate at horizon `j`.
pub fn espr(
    panel: &StaggeredPanel,
    j: i64,
    estimator: StaggeredEstimator,
    nuisance: Option<&NuisanceConfig>,
    alpha: f64,
) -> Result<EsprReport> {
    let horizon = panel.horizon() as i64;
    let lo = 1.max(-j);
    let hi = horizon.min(horizon - j);
    let n_never = panel.cohort_size(None);
    let mut warnings = Vec::new();
    let mut contributions = Vec::new();
    let mut components = Vec::new();
    for s in panel.cohorts() {
        let si = s as i64;
        if si < lo || si > hi {
            continue;
        }
        let n_s = panel.cohort_size(Some(s));
        if n_s < 2 || n_never < 2 {
            warnings.push(format!(
                "cohort s = {s} dropped: {n_s} adopters and {n_never} never-treated units (need 2 each)"
            ));
            continue;
        }
        let c = contribution(panel, s, j, estimator, nuisance)?;
        let theta_s = c.theta_num / c.theta_den;
        let (coefficients, num, den) = match estimator {
            StaggeredEstimator::Regression => {
                let pw = pairwise_theta(panel, s, j)?;
                (pw.coefficients, pw.num, pw.den)
            }
            StaggeredEstimator::Dr => (None, c.theta_num, c.theta_den),
        };
        components.push(PairwiseTheta {
            s,
            j,
            num,
            den,
            theta: num / den,
            se: single_cohort_se(panel, &c, theta_s),
            coefficients,
            n_cohort: n_s,
            n_never,
        });
        contributions.push(c);
    }
    if contributions.is_empty() {
        return Err(Error::NoEligibleGroups(j));
    }
    let nf = panel.n() as f64;
    let weights: Vec<(usize, f64)> = contributions
        .iter()
        .map(|c| (c.s, c.n_cohort as f64 / nf))
        .collect();
    let numerator: f64 = weights.iter().zip(&components).map(|((_, p), c)| p * c.num).sum();
    let denominator: f64 = weights.iter().zip(&components).map(|((_, p), c)| p * c.den).sum();
    guard_denominator(denominator, "ESPR denominator")?;
    // With one cohort the weight cancels; keep the pairwise ratio bit-for-bit.
    let theta = match components.as_slice() {
        [only] => only.theta,
        _ => numerator / denominator,
    };
    let inf = stacked_inference(panel, &contributions)?;
    let z = two_sided_z(alpha);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(EsprReport {
        j,
        estimator,
        theta,
        se: inf.se,
        ci: [theta - z * inf.se, theta + z * inf.se],
        level: 1.0 - alpha,
        weights,
        numerator,
        denominator,
        components,
        pretrend: j < 0,
        n: panel.n(),
        warnings,
    })
}

/// Pre-treatment placebo at a negative horizon.
pub fn espr_pretrend(
    panel: &StaggeredPanel,
    j: i64,
    estimator: StaggeredEstimator,
    nuisance: Option<&NuisanceConfig>,
    alpha: f64,
) -> Result<EsprReport> {
    if j >= 0 {
        return Err(Error::HorizonOutOfRange(format!("pretrend horizon must be negative, got {j}")));
    }
    espr(panel, j, estimator, nuisance, alpha)
}

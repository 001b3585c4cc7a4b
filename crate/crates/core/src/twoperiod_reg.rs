//! Regression estimators for the two-period design: saturated two-way fixed
//! effects, the IV/GMM form, persuasion-type shares and covariate partialling.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dataset::TwoPeriodPanel;
use crate::error::{guard_denominator, Error, Result, DENOMINATOR_GUARD};
use crate::report::{Estimand, EstimateReport, Target};
use crate::stats::{cluster_robust_cov, ols, small_cluster_factor};

/// Outcome data the regression estimators need. Outcomes are real-valued so
/// residualized panels can be passed through.
pub trait TwoPeriodData {
    fn len(&self) -> usize;
    fn y0(&self, i: usize) -> f64;
    fn y1(&self, i: usize) -> f64;
    fn treated(&self, i: usize) -> bool;
    fn cluster_index(&self) -> (Vec<usize>, usize);
    fn has_clusters(&self) -> bool;
    fn notes(&self) -> Vec<String> {
        Vec::new()
    }
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TwoPeriodData for TwoPeriodPanel {
    fn len(&self) -> usize {
        self.n()
    }
    fn y0(&self, i: usize) -> f64 {
        self.units()[i].y0 as f64
    }
    fn y1(&self, i: usize) -> f64 {
        self.units()[i].y1 as f64
    }
    fn treated(&self, i: usize) -> bool {
        self.units()[i].treated()
    }
    fn cluster_index(&self) -> (Vec<usize>, usize) {
        TwoPeriodPanel::cluster_index(self)
    }
    fn has_clusters(&self) -> bool {
        TwoPeriodPanel::has_clusters(self)
    }
}

/// Coefficients of `Y_it = g0 + g1 G_i + g2 t + g G_i t + e_it`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeCoefficients {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma: f64,
}

impl FeCoefficients {
    pub fn aprt_denominator(&self) -> f64 {
        1.0 - self.gamma0 - self.gamma1 - self.gamma2
    }

    pub fn raprt_denominator(&self) -> f64 {
        self.gamma0 + self.gamma1 + self.gamma2 + self.gamma
    }
}

fn check_arms<D: TwoPeriodData + ?Sized>(data: &D) -> Result<()> {
    let treated = (0..data.len()).filter(|&i| data.treated(i)).count();
    if treated == 0 {
        return Err(Error::EmptyArm("no treated units".into()));
    }
    if treated == data.len() {
        return Err(Error::EmptyArm("no control units".into()));
    }
    Ok(())
}

fn stacked_design<D: TwoPeriodData + ?Sized>(data: &D) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.len();
    let x = DMatrix::from_fn(2 * n, 4, |r, c| {
        let i = r / 2;
        let t = (r % 2) as f64;
        let g = data.treated(i) as u8 as f64;
        match c {
            0 => 1.0,
            1 => g,
            2 => t,
            _ => g * t,
        }
    });
    let y = DVector::from_fn(2 * n, |r, _| {
        let i = r / 2;
        if r % 2 == 0 {
            data.y0(i)
        } else {
            data.y1(i)
        }
    });
    (x, y)
}

/// Saturated OLS with a cluster-robust covariance (each unit's two rows share a cluster).
#[derive(Debug, Clone, PartialEq)]
pub struct FeFit {
    pub coef: FeCoefficients,
    pub cov: Matrix4<f64>,
    pub n: usize,
}

pub fn fit_two_way_fe_with_cov<D: TwoPeriodData + ?Sized>(data: &D) -> Result<FeFit> {
    check_arms(data)?;
    let (x, y) = stacked_design(data);
    let fit = ols(&x, &y)?;
    let (units, g) = data.cluster_index();
    let rows: Vec<usize> = (0..2 * data.len()).map(|r| units[r / 2]).collect();
    let cov = cluster_robust_cov(&x, &fit.resid, &fit.xtx_inv, &rows, g);
    let c = &fit.coef;
    Ok(FeFit {
        coef: FeCoefficients {
            gamma0: c[0],
            gamma1: c[1],
            gamma2: c[2],
            gamma: c[3],
        },
        cov: Matrix4::from_fn(|r, k| cov[(r, k)]),
        n: data.len(),
    })
}

pub fn fit_two_way_fe<D: TwoPeriodData + ?Sized>(data: &D) -> Result<FeCoefficients> {
    Ok(fit_two_way_fe_with_cov(data)?.coef)
}

fn fe_ratio(coef: &FeCoefficients, target: Target) -> (f64, f64, Vector4<f64>) {
    let g = coef.gamma;
    match target {
        Target::Aprt => {
            let den = coef.aprt_denominator();
            let a = g / (den * den);
            (g, den, Vector4::new(a, a, a, 1.0 / den))
        }
        Target::Raprt => {
            let den = coef.raprt_denominator();
            let a = -g / (den * den);
            (g, den, Vector4::new(a, a, a, 1.0 / den + a))
        }
    }
}

/// Persuasion rate from FE coefficients with a delta-method standard error.
pub fn rate_from_fe<D: TwoPeriodData + ?Sized>(
    coef: &FeCoefficients,
    data: &D,
    target: Target,
    alpha: f64,
) -> Result<EstimateReport> {
    let (num, den, grad) = fe_ratio(coef, target);
    guard_denominator(den, "FE persuasion-rate denominator")?;
    let fit = fit_two_way_fe_with_cov(data)?;
    let var = (grad.transpose() * fit.cov * grad)[(0, 0)];
    let mut r = EstimateReport::new(target.estimand(), "fe", num / den, var.max(0.0).sqrt(), alpha, data.len())
        .with_diagnostic("coefficients", coef)
        .with_diagnostic("clustered", data.has_clusters());
    for w in data.notes() {
        r.warn(w);
    }
    Ok(r)
}

pub fn aprt_from_fe<D: TwoPeriodData + ?Sized>(coef: &FeCoefficients, data: &D, alpha: f64) -> Result<EstimateReport> {
    rate_from_fe(coef, data, Target::Aprt, alpha)
}

pub fn raprt_from_fe<D: TwoPeriodData + ?Sized>(coef: &FeCoefficients, data: &D, alpha: f64) -> Result<EstimateReport> {
    rate_from_fe(coef, data, Target::Raprt, alpha)
}

/// Regressor `A` of the IV form: `D + Y1 (1 - D) - Y0` for APRT, `Y1 D` for R-APRT.
fn iv_regressor<D: TwoPeriodData + ?Sized>(data: &D, i: usize, target: Target) -> f64 {
    let d = data.treated(i) as u8 as f64;
    match target {
        Target::Aprt => d + data.y1(i) * (1.0 - d) - data.y0(i),
        Target::Raprt => data.y1(i) * d,
    }
}

struct IvFit {
    beta: [f64; 2],
    /// Per-unit moment contributions `Z_i e_i`.
    scores: Vec<[f64; 2]>,
    /// Inverse of the moment Jacobian `-mean(Z W')`.
    ginv: Matrix2<f64>,
}

fn iv_fit<D: TwoPeriodData + ?Sized>(data: &D, target: Target) -> Result<IvFit> {
    let n = data.len();
    let nf = n as f64;
    let dy: Vec<f64> = (0..n).map(|i| data.y1(i) - data.y0(i)).collect();
    let a: Vec<f64> = (0..n).map(|i| iv_regressor(data, i, target)).collect();
    let d: Vec<f64> = (0..n).map(|i| data.treated(i) as u8 as f64).collect();
    let md = d.iter().sum::<f64>() / nf;
    let ma = a.iter().sum::<f64>() / nf;
    let mdy = dy.iter().sum::<f64>() / nf;
    let cov_ad = (0..n).map(|i| (a[i] - ma) * (d[i] - md)).sum::<f64>() / nf;
    let cov_yd = (0..n).map(|i| (dy[i] - mdy) * (d[i] - md)).sum::<f64>() / nf;
    if !cov_ad.is_finite() || cov_ad.abs() <= DENOMINATOR_GUARD {
        return Err(Error::WeakDenominator {
            value: cov_ad,
            guard: DENOMINATOR_GUARD,
        });
    }
    let b1 = cov_yd / cov_ad;
    let b0 = mdy - b1 * ma;
    let scores = (0..n)
        .map(|i| {
            let e = dy[i] - b0 - b1 * a[i];
            [e, d[i] * e]
        })
        .collect();
    // Jacobian of mean(Z (dy - b0 - b1 A)) in (b0, b1).
    let mad = (0..n).map(|i| a[i] * d[i]).sum::<f64>() / nf;
    let jac = -Matrix2::new(1.0, ma, md, mad);
    let ginv = jac.try_inverse().ok_or(Error::WeakDenominator {
        value: cov_ad,
        guard: DENOMINATOR_GUARD,
    })?;
    Ok(IvFit {
        beta: [b0, b1],
        scores,
        ginv,
    })
}

/// Cluster sum of per-unit score vectors, scaled to `sum_g s_g s_g' / n * G/(G-1)`.
fn score_covariance(scores: &[Vec<f64>], clusters: &[usize], g: usize) -> DMatrix<f64> {
    let k = scores.first().map_or(0, |s| s.len());
    let n = scores.len() as f64;
    let mut sums = DMatrix::<f64>::zeros(g, k);
    for (s, &c) in scores.iter().zip(clusters) {
        for j in 0..k {
            sums[(c, j)] += s[j];
        }
    }
    sums.transpose() * sums / n * small_cluster_factor(g)
}

/// Just-identified IV with `D` as the instrument for `A`.
pub fn gmm_iv<D: TwoPeriodData + ?Sized>(data: &D, target: Target, alpha: f64) -> Result<EstimateReport> {
    check_arms(data)?;
    let fit = iv_fit(data, target)?;
    let (cl, g) = data.cluster_index();
    let scores: Vec<Vec<f64>> = fit.scores.iter().map(|s| s.to_vec()).collect();
    let s = score_covariance(&scores, &cl, g);
    let s2 = Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]);
    let v = fit.ginv * s2 * fit.ginv.transpose() / data.len() as f64;
    let mut r = EstimateReport::new(target.estimand(), "gmm", fit.beta[1], v[(1, 1)].max(0.0).sqrt(), alpha, data.len())
        .with_diagnostic("intercept", fit.beta[0])
        .with_diagnostic("clustered", data.has_clusters());
    for w in data.notes() {
        r.warn(w);
    }
    Ok(r)
}

/// Both rates from the stacked four-moment system, with their joint covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointGmm {
    pub aprt: EstimateReport,
    pub raprt: EstimateReport,
    /// APRT minus R-APRT.
    pub difference: EstimateReport,
    /// Covariance of (APRT, R-APRT).
    pub covariance: [[f64; 2]; 2],
}

pub fn gmm_joint<D: TwoPeriodData + ?Sized>(data: &D, alpha: f64) -> Result<JointGmm> {
    check_arms(data)?;
    let fa = iv_fit(data, Target::Aprt)?;
    let fr = iv_fit(data, Target::Raprt)?;
    let (cl, g) = data.cluster_index();
    let scores: Vec<Vec<f64>> = fa
        .scores
        .iter()
        .zip(&fr.scores)
        .map(|(a, r)| vec![a[0], a[1], r[0], r[1]])
        .collect();
    let s = score_covariance(&scores, &cl, g);
    let mut ginv = DMatrix::<f64>::zeros(4, 4);
    for r in 0..2 {
        for c in 0..2 {
            ginv[(r, c)] = fa.ginv[(r, c)];
            ginv[(r + 2, c + 2)] = fr.ginv[(r, c)];
        }
    }
    let n = data.len();
    let v = &ginv * s * ginv.transpose() / n as f64;
    let (va, vr, cv) = (v[(1, 1)], v[(3, 3)], v[(1, 3)]);
    let aprt = EstimateReport::new(Estimand::Aprt, "gmm_joint", fa.beta[1], va.max(0.0).sqrt(), alpha, n);
    let raprt = EstimateReport::new(Estimand::Raprt, "gmm_joint", fr.beta[1], vr.max(0.0).sqrt(), alpha, n);
    let difference = EstimateReport::new(
        Estimand::AprtMinusRaprt,
        "gmm_joint",
        fa.beta[1] - fr.beta[1],
        (va + vr - 2.0 * cv).max(0.0).sqrt(),
        alpha,
        n,
    );
    Ok(JointGmm {
        aprt,
        raprt,
        difference,
        covariance: [[va, cv], [cv, vr]],
    })
}

/// Shares of treatment-persuadable, never-persuadable and already-persuaded
/// units among the treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeShares {
    pub tp: f64,
    pub np: f64,
    pub ap: f64,
    /// Set when `tp < 0`, which can happen with a negative ATT estimate.
    pub negative_tp: bool,
}

/// Shares from `ATT` and `Pr(Y1 = 1 | D = 1)`.
pub fn type_shares_from_summary(att: f64, treated_y1_share: f64) -> TypeShares {
    let np = 1.0 - treated_y1_share;
    let tp = att;
    let ap = 1.0 - np - tp;
    TypeShares {
        tp,
        np,
        ap,
        negative_tp: tp < 0.0,
    }
}

pub fn type_shares(panel: &TwoPeriodPanel, att: f64) -> Result<TypeShares> {
    let treated: Vec<_> = panel.units().iter().filter(|u| u.treated()).collect();
    if treated.is_empty() {
        return Err(Error::EmptyArm("no treated units".into()));
    }
    let share = treated.iter().map(|u| u.y1 as f64).sum::<f64>() / treated.len() as f64;
    Ok(type_shares_from_summary(att, share))
}

pub const CONTAMINATION_WARNING: &str =
    "covariates were partialled out linearly; with heterogeneous effects this can induce contamination bias";

/// Panel with outcomes residualized on covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualizedPanel {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub d: Vec<u8>,
    /// Covariate slopes by period.
    pub beta: [Vec<f64>; 2],
    clusters: (Vec<usize>, usize),
    has_clusters: bool,
}

impl TwoPeriodData for ResidualizedPanel {
    fn len(&self) -> usize {
        self.d.len()
    }
    fn y0(&self, i: usize) -> f64 {
        self.y0[i]
    }
    fn y1(&self, i: usize) -> f64 {
        self.y1[i]
    }
    fn treated(&self, i: usize) -> bool {
        self.d[i] == 1
    }
    fn cluster_index(&self) -> (Vec<usize>, usize) {
        self.clusters.clone()
    }
    fn has_clusters(&self) -> bool {
        self.has_clusters
    }
    fn notes(&self) -> Vec<String> {
        vec![CONTAMINATION_WARNING.to_string()]
    }
}

/// Regress each period's outcome on `(1, D, X)` and subtract the covariate
/// part, centred at the covariate means.
pub fn partial_out_covariates(panel: &TwoPeriodPanel) -> Result<ResidualizedPanel> {
    let k = panel.dim_x();
    if k == 0 {
        return Err(Error::InvalidInput("no covariates to partial out".into()));
    }
    let n = panel.n();
    let units = panel.units();
    let design = DMatrix::from_fn(n, k + 2, |i, c| match c {
        0 => 1.0,
        1 => units[i].d as f64,
        _ => units[i].x[c - 2],
    });
    let xbar: Vec<f64> = (0..k)
        .map(|j| units.iter().map(|u| u.x[j]).sum::<f64>() / n as f64)
        .collect();
    let mut beta: [Vec<f64>; 2] = Default::default();
    let mut ys: [Vec<f64>; 2] = Default::default();
    for t in 0..2 {
        let y = DVector::from_fn(n, |i, _| if t == 0 { units[i].y0 } else { units[i].y1 } as f64);
        let fit = ols(&design, &y)?;
        beta[t] = fit.coef.iter().skip(2).copied().collect();
        ys[t] = (0..n)
            .map(|i| {
                let adj: f64 = (0..k).map(|j| (units[i].x[j] - xbar[j]) * beta[t][j]).sum();
                y[i] - adj
            })
            .collect();
    }
    let [y0, y1] = ys;
    log::warn!("{CONTAMINATION_WARNING}");
    Ok(ResidualizedPanel {
        y0,
        y1,
        d: units.iter().map(|u| u.d).collect(),
        beta,
        clusters: panel.cluster_index(),
        has_clusters: panel.has_clusters(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Unit;

    /// Cell means (E[Y0|D=0], E[Y1|D=0], E[Y0|D=1], E[Y1|D=1]) = (0.3, 0.4, 0.2, 0.8).
    fn reference_panel() -> TwoPeriodPanel {
        let mut units = Vec::new();
        for i in 0..10 {
            units.push(Unit::new((i < 3) as u8, (i < 4) as u8, 0));
            units.push(Unit::new((i < 2) as u8, (i < 8) as u8, 1));
        }
        TwoPeriodPanel::new(units).unwrap()
    }

    #[test]
    fn fe_coefficients_are_cell_contrasts() {
        let c = fit_two_way_fe(&reference_panel()).unwrap();
        for (got, want) in [(c.gamma0, 0.3), (c.gamma1, -0.1), (c.gamma2, 0.1), (c.gamma, 0.5)] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn fe_rates() {
        let p = reference_panel();
        let c = fit_two_way_fe(&p).unwrap();
        let a = aprt_from_fe(&c, &p, 0.05).unwrap();
        let r = raprt_from_fe(&c, &p, 0.05).unwrap();
        assert!((a.point - 0.5 / 0.7).abs() < 1e-12);
        assert!((r.point - 0.625).abs() < 1e-12);
        assert!(a.se > 0.0 && r.se > 0.0);
    }

    #[test]
    fn all_zero_outcomes() {
        let units = (0..6).map(|i| Unit::new(0, 0, (i % 2) as u8)).collect();
        let p = TwoPeriodPanel::new(units).unwrap();
        let c = fit_two_way_fe(&p).unwrap();
        assert_eq!([c.gamma0, c.gamma1, c.gamma2, c.gamma], [0.0; 4]);
        assert_eq!(aprt_from_fe(&c, &p, 0.05).unwrap().point, 0.0);
        // R-APRT denominator E[Y1|D=1] is zero here.
        assert_eq!(raprt_from_fe(&c, &p, 0.05).unwrap_err().code(), "DEGENERATE_DENOMINATOR");
    }

    #[test]
    fn guard_on_tiny_denominator() {
        let p = reference_panel();
        let c = FeCoefficients {
            gamma0: 0.5,
            gamma1: 0.25,
            gamma2: 0.25 - 1e-14,
            gamma: 0.1,
        };
        assert_eq!(aprt_from_fe(&c, &p, 0.05).unwrap_err().code(), "DEGENERATE_DENOMINATOR");
    }

    #[test]
    fn gmm_matches_fe() {
        let p = reference_panel();
        let c = fit_two_way_fe(&p).unwrap();
        for t in Target::BOTH {
            let fe = rate_from_fe(&c, &p, t, 0.05).unwrap();
            let iv = gmm_iv(&p, t, 0.05).unwrap();
            assert!((fe.point - iv.point).abs() < 1e-12);
        }
        let j = gmm_joint(&p, 0.05).unwrap();
        assert!((j.aprt.point - 0.5 / 0.7).abs() < 1e-12);
        assert!((j.difference.point - (0.5 / 0.7 - 0.625)).abs() < 1e-12);
    }

    #[test]
    fn gmm_weak_instrument_when_outcomes_flat() {
        // A = D + Y1 (1 - D) - Y0 averages 0 in both arms, so Cov(A, D) = 0.
        let units = vec![
            Unit::new(0, 0, 0),
            Unit::new(1, 1, 0),
            Unit::new(1, 0, 1),
            Unit::new(1, 1, 1),
        ];
        let p = TwoPeriodPanel::new(units).unwrap();
        assert_eq!(gmm_iv(&p, Target::Aprt, 0.05).unwrap_err().code(), "WEAK_DENOMINATOR");
    }

    #[test]
    fn shares() {
        let s = type_shares_from_summary(0.089, 0.583);
        assert!((s.tp - 0.089).abs() < 1e-12 && (s.np - 0.417).abs() < 1e-12 && (s.ap - 0.494).abs() < 1e-12);
        let s = type_shares_from_summary(0.0, 0.8);
        assert!((s.np - 0.2).abs() < 1e-15 && (s.ap - 0.8).abs() < 1e-15);
        let s = type_shares(&reference_panel(), 0.5).unwrap();
        assert!((s.tp - 0.5).abs() < 1e-12 && (s.np - 0.2).abs() < 1e-12 && (s.ap - 0.3).abs() < 1e-12);
        assert!((s.tp + s.np + s.ap - 1.0).abs() < 1e-15);
    }

    #[test]
    fn partial_out_rejects_constant_column() {
        let units = reference_panel()
            .units()
            .iter()
            .map(|u| u.clone().with_x(vec![2.0]))
            .collect();
        let p = TwoPeriodPanel::new(units).unwrap();
        assert_eq!(partial_out_covariates(&p).unwrap_err().code(), "RANK_DEFICIENT_X");
    }

    #[test]
    fn partial_out_orthogonal_covariate_is_noop() {
        // x alternates within every (d, y0, y1) pattern pair so it is orthogonal.
        let mut units = Vec::new();
        for u in reference_panel().units() {
            units.push(u.clone().with_x(vec![1.0]));
            units.push(u.clone().with_x(vec![-1.0]));
        }
        let p = TwoPeriodPanel::new(units).unwrap();
        let r = partial_out_covariates(&p).unwrap();
        for i in 0..p.n() {
            assert!((r.y0[i] - p.units()[i].y0 as f64).abs() < 1e-12);
        }
        let a = rate_from_fe(&fit_two_way_fe(&r).unwrap(), &r, Target::Aprt, 0.05).unwrap();
        assert!((a.point - 0.5 / 0.7).abs() < 1e-10);
        assert_eq!(a.warnings, vec![CONTAMINATION_WARNING.to_string()]);
    }
}

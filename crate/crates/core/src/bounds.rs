//! Bounds on the persuasion rates when backlash is not ruled out.
//!
//! Joints are indexed `p_st = Pr(Y(0) = s, Y(1) = t)`, so with
//! `pi = Pr(Y(1) = 1)` and `tau = Pr(Y(0) = 1)` the conditional rates are
//! `theta = p01 / (1 - tau)` and `rtheta = p01 / pi`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::TwoPeriodPanel;
use crate::error::{guard_denominator, Error, Result};
use crate::semipar::PsiEvaluator;

/// Tolerance for membership in the indicator sets (ties count as members).
pub const MEMBERSHIP_TOL: f64 = 1e-10;

/// Frechet-Hoeffding bounds at one covariate value. The raw (untruncated)
/// formulas are stored; [`ConditionalBounds::theta_interval`] and
/// [`ConditionalBounds::rtheta_interval`] give the effective intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBounds {
    pub theta_cl: f64,
    pub theta_cu: f64,
    pub rtheta_cl: f64,
    pub rtheta_cu: f64,
    pub alpha_x: f64,
}

impl ConditionalBounds {
    pub fn theta_interval(&self) -> [f64; 2] {
        [self.theta_cl.max(0.0), self.theta_cu.min(1.0)]
    }

    pub fn rtheta_interval(&self) -> [f64; 2] {
        [self.rtheta_cl.max(0.0), self.rtheta_cu.min(1.0)]
    }
}

pub fn conditional_bounds(pi1_1x: f64, tau_cx: f64) -> Result<ConditionalBounds> {
    if !(pi1_1x > 0.0 && pi1_1x < 1.0) {
        return Err(Error::Domain(format!("Pr(Y(1)=1) = {pi1_1x} must lie in (0, 1)")));
    }
    if !(0.0..1.0).contains(&tau_cx) {
        return Err(Error::Domain(format!("Pr(Y(0)=1) = {tau_cx} must lie in [0, 1)")));
    }
    let (pi, tau) = (pi1_1x, tau_cx);
    Ok(ConditionalBounds {
        theta_cl: (pi - tau) / (1.0 - tau),
        theta_cu: pi / (1.0 - tau),
        rtheta_cl: (pi - tau) / pi,
        rtheta_cu: (1.0 - tau) / pi,
        alpha_x: (1.0 - tau) / pi,
    })
}

/// Joint `[p00, p01, p10, p11]` with the given marginals and `p01 = x`.
pub fn joint_for_p01(pi: f64, tau: f64, x: f64) -> [f64; 4] {
    [1.0 - tau - x, x, tau - pi + x, pi - x]
}

/// Joints attaining the lower and upper ends of the effective intervals.
pub fn extremal_joints(pi: f64, tau: f64) -> ([f64; 4], [f64; 4]) {
    let lo = (pi - tau).max(0.0);
    let hi = pi.min(1.0 - tau);
    (joint_for_p01(pi, tau, lo), joint_for_p01(pi, tau, hi))
}

/// `(theta, rtheta)` implied by a joint `[p00, p01, p10, p11]`.
pub fn rates_from_joint(p: [f64; 4]) -> (f64, f64) {
    (p[1] / (p[0] + p[1]), p[1] / (p[1] + p[3]))
}

/// Segment of the `(theta, rtheta)` plane containing the identified set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedLine {
    pub slope: f64,
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateBounds {
    pub theta_star_l: f64,
    pub theta_star_u: f64,
    pub rtheta_star_l: f64,
    pub rtheta_star_u: f64,
    pub line: IdentifiedLine,
    pub n_treated: usize,
}

/// Per-treated-unit indicator membership.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub unit: usize,
    pub psi: f64,
    pub pi11: f64,
    pub in_lower_set: bool,
    pub in_upper_set: bool,
}

pub fn membership(panel: &TwoPeriodPanel, evaluator: &PsiEvaluator) -> Result<Vec<Membership>> {
    let v = &evaluator.fit.values;
    if v.n() != panel.n() {
        return Err(Error::InvalidInput("nuisance values do not match the panel".into()));
    }
    let mut out = Vec::new();
    for (i, u) in panel.units().iter().enumerate() {
        if !u.treated() {
            continue;
        }
        let psi = evaluator.at_unit(i)?.clipped();
        let pi11 = v.pi[1][1][i];
        out.push(Membership {
            unit: i,
            psi,
            pi11,
            in_lower_set: psi <= pi11 + MEMBERSHIP_TOL,
            in_upper_set: psi <= 1.0 - pi11 + MEMBERSHIP_TOL,
        });
    }
    Ok(out)
}

/// Sharp bounds aggregated over the treated, evaluated at the nuisance values.
pub fn aggregate_sharp_bounds(panel: &TwoPeriodPanel, evaluator: &PsiEvaluator) -> Result<AggregateBounds> {
    let m = membership(panel, evaluator)?;
    if m.is_empty() {
        return Err(Error::EmptyArm("no treated units".into()));
    }
    let k = m.len() as f64;
    let (mut lo, mut hi, mut untreated_cf, mut y1) = (0.0, 0.0, 0.0, 0.0);
    for u in &m {
        if u.in_lower_set {
            lo += u.pi11 - u.psi;
        }
        hi += if u.in_upper_set { u.pi11 } else { 1.0 - u.psi };
        untreated_cf += 1.0 - u.psi;
        y1 += u.pi11;
    }
    let (lo, hi, den, rden) = (lo / k, hi / k, untreated_cf / k, y1 / k);
    guard_denominator(den, "E[1 - Psi | D = 1]")?;
    guard_denominator(rden, "Pr(Y1 = 1 | D = 1)")?;
    let slope = den / rden;
    let b = AggregateBounds {
        theta_star_l: lo / den,
        theta_star_u: hi / den,
        rtheta_star_l: lo / rden,
        rtheta_star_u: hi / rden,
        line: IdentifiedLine {
            slope,
            lower: [lo / den, lo / rden],
            upper: [hi / den, hi / rden],
        },
        n_treated: m.len(),
    };
    Ok(b)
}

pub fn identified_line(bounds: &AggregateBounds) -> IdentifiedLine {
    bounds.line
}

pub fn write_membership_csv<W: Write>(out: W, rows: &[Membership]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<membership>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Unit;
    use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceMethod};
    use crate::semipar::{estimate_did, Link};
    use crate::report::Target;

    fn marginals(p: [f64; 4]) -> (f64, f64) {
        (p[1] + p[3], p[2] + p[3])
    }

    #[test]
    fn bounds_contain_truth() {
        let joint = [0.3, 0.4, 0.1, 0.2];
        let (pi, tau) = marginals(joint);
        let b = conditional_bounds(pi, tau).unwrap();
        assert!((b.theta_cl - 0.428_571_428_571_428_6).abs() < 1e-12);
        assert!((b.theta_cu - 0.857_142_857_142_857_2).abs() < 1e-12);
        let (theta, _) = rates_from_joint(joint);
        assert!((theta - 0.4 / 0.7).abs() < 1e-12);
        let [lo, hi] = b.theta_interval();
        assert!(lo <= theta && theta <= hi);
    }

    #[test]
    fn no_backlash_point_identifies() {
        let joint = [0.3, 0.4, 0.0, 0.3];
        let (pi, tau) = marginals(joint);
        let b = conditional_bounds(pi, tau).unwrap();
        assert!((b.theta_cl - rates_from_joint(joint).0).abs() < 1e-15);
        assert!((b.theta_cl - 0.571_428_571_428_571_4).abs() < 1e-12);
    }

    #[test]
    fn zero_tau_is_a_point() {
        let b = conditional_bounds(0.35, 0.0).unwrap();
        assert_eq!(b.theta_cl, 0.35);
        assert_eq!(b.theta_cu, 0.35);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(conditional_bounds(0.0, 0.2).unwrap_err().code(), "DOMAIN");
        assert_eq!(conditional_bounds(0.5, 1.0).unwrap_err().code(), "DOMAIN");
    }

    #[test]
    fn linear_relation_on_effective_intervals() {
        for &(pi, tau) in &[(0.6, 0.3), (0.2, 0.5), (0.9, 0.7), (0.5, 0.5)] {
            let b = conditional_bounds(pi, tau).unwrap();
            let t = b.theta_interval();
            let r = b.rtheta_interval();
            assert!((t[0] * b.alpha_x - r[0]).abs() < 1e-12);
            assert!((t[1] * b.alpha_x - r[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_without_covariates() {
        let mut units = Vec::new();
        for i in 0..10 {
            units.push(Unit::new((i < 3) as u8, (i < 4) as u8, 0));
            units.push(Unit::new((i < 2) as u8, (i < 8) as u8, 1));
        }
        let panel = TwoPeriodPanel::new(units).unwrap();
        let fit = fit_nuisance(&panel, &NuisanceConfig::new(NuisanceMethod::Constant)).unwrap();
        let eval = PsiEvaluator::new(Link::Identity, &fit);
        let b = aggregate_sharp_bounds(&panel, &eval).unwrap();
        let did = estimate_did(&panel, &fit, Target::Aprt, 0.05).unwrap().point;
        assert!((b.theta_star_l - did.max(0.0)).abs() < 1e-12);
        // Psi = 0.3, pi11 = 0.8 > 1 - Psi: numerator upper is 1 - Psi.
        assert!((b.theta_star_u - 1.0).abs() < 1e-12);
        let line = identified_line(&b);
        assert!((line.lower[1] - line.slope * line.lower[0]).abs() < 1e-12);
        assert!((line.upper[1] - line.slope * line.upper[0]).abs() < 1e-12);
        let mut buf = Vec::new();
        write_membership_csv(&mut buf, &membership(&panel, &eval).unwrap()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 11);
    }
}

//! Back-of-the-envelope persuasion rates from a published ATT, its standard
//! error, and an interval for `q = Pr(Y1 = 0 | D = 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{guard_denominator, Error, Result};
use crate::report::Target;
use crate::stats::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoeInput {
    pub att: f64,
    pub se_att: f64,
    #[serde(default)]
    pub q: Option<f64>,
    pub q_lower: f64,
    pub q_upper: f64,
    pub alpha: f64,
    /// Share of `alpha` spent on the `q` interval. Defaults to `alpha / 2`.
    pub alpha0: f64,
}

impl BoeInput {
    pub fn new(att: f64, se_att: f64, q_lower: f64, q_upper: f64, alpha: f64) -> Self {
        BoeInput {
            att,
            se_att,
            q: None,
            q_lower,
            q_upper,
            alpha,
            alpha0: alpha / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.att < 0.0 {
            return Err(Error::NegativeAtt(self.att));
        }
        if !(self.se_att >= 0.0) {
            return Err(Error::InvalidInput(format!("se {} must be nonnegative", self.se_att)));
        }
        if !(0.0 < self.q_lower && self.q_lower <= self.q_upper && self.q_upper < 1.0) {
            return Err(Error::InvalidInput(format!(
                "need 0 < q_lower <= q_upper < 1, got [{}, {}]",
                self.q_lower, self.q_upper
            )));
        }
        if let Some(q) = self.q {
            if q < self.q_lower || q > self.q_upper {
                return Err(Error::InvalidInput(format!("q = {q} lies outside [q_lower, q_upper]")));
            }
        }
        if !(0.0 < self.alpha && self.alpha < 1.0 && 0.0 <= self.alpha0 && self.alpha0 < self.alpha) {
            return Err(Error::InvalidInput("need 0 <= alpha0 < alpha < 1".into()));
        }
        Ok(())
    }

    /// `z_{1 - (alpha - alpha0) / 2}`.
    pub fn z(&self) -> f64 {
        normal_quantile(1.0 - (self.alpha - self.alpha0) / 2.0)
    }
}

/// `ATT / (ATT + q)` or `ATT / (1 - q)`.
pub fn boe_point(att: f64, q: f64, target: Target) -> Result<f64> {
    if att < 0.0 {
        return Err(Error::NegativeAtt(att));
    }
    let den = match target {
        Target::Aprt => att + q,
        Target::Raprt => 1.0 - q,
    };
    if att == 0.0 && den > 0.0 {
        return Ok(0.0);
    }
    guard_denominator(den, "back-of-the-envelope denominator")?;
    Ok(att / den)
}

/// Bonferroni interval combining the ATT interval with `[q_lower, q_upper]`:
/// the envelope over `q` in that range of the pointwise delta-method
/// intervals. When the pointwise endpoints are monotone in `q` this is
/// `[APRT(q_upper) - ..., APRT(q_lower) + ...]`; otherwise the interior
/// extremum is used so that a wider `q` range never gives a shorter interval.
pub fn boe_ci(input: &BoeInput, target: Target) -> Result<(f64, f64)> {
    input.validate()?;
    let c = input.z() * input.se_att;
    let (att, ql, qu) = (input.att, input.q_lower, input.q_upper);
    match target {
        Target::Aprt => {
            boe_point(att, qu, target)?;
            let lower = |q: f64| att / (att + q) - c * q / (att + q).powi(2);
            let upper = |q: f64| att / (att + q) + c * q / (att + q).powi(2);
            // Stationary points of the two pointwise endpoints.
            let q_min = (c > att).then(|| att * (att + c) / (c - att));
            let q_max = (c > att).then(|| att * (c - att) / (att + c));
            let lo = candidates(ql, qu, q_min).map(lower).fold(f64::INFINITY, f64::min);
            let hi = candidates(ql, qu, q_max).map(upper).fold(f64::NEG_INFINITY, f64::max);
            Ok((lo, hi))
        }
        Target::Raprt => {
            boe_point(att, qu, target)?;
            let lo = ((att - c) / (1.0 - ql)).min((att - c) / (1.0 - qu));
            let hi = (att + c) / (1.0 - qu);
            Ok((lo, hi))
        }
    }
}

fn candidates(ql: f64, qu: f64, interior: Option<f64>) -> impl Iterator<Item = f64> {
    [Some(ql), Some(qu), interior.filter(|q| (ql..=qu).contains(q))]
        .into_iter()
        .flatten()
}

/// Wald interval `q_hat +- z sqrt(q_hat (1 - q_hat) / n)` truncated to the open unit interval.
pub fn q_interval_from_counts(successes: u64, n_treated: u64, level: f64) -> Result<(f64, f64)> {
    if n_treated == 0 || successes > n_treated {
        return Err(Error::InvalidInput(format!(
            "need 0 <= successes <= n_treated and n_treated >= 1, got {successes}/{n_treated}"
        )));
    }
    let n = n_treated as f64;
    let q = successes as f64 / n;
    Ok(q_interval(q, n, level))
}

/// Same interval from a share and a sample size.
pub fn q_interval(q_hat: f64, n: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile((1.0 + level) / 2.0);
    let half = z * (q_hat * (1.0 - q_hat) / n).sqrt();
    let eps = f64::EPSILON;
    ((q_hat - half).max(eps), (q_hat + half).min(1.0 - eps))
}

/// Point estimates and intervals for both targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoeReport {
    pub aprt: Option<f64>,
    pub aprt_ci: (f64, f64),
    pub raprt: Option<f64>,
    pub raprt_ci: (f64, f64),
    pub z: f64,
}

pub fn boe_report(input: &BoeInput) -> Result<BoeReport> {
    input.validate()?;
    let point = |t| input.q.map(|q| boe_point(input.att, q, t)).transpose();
    Ok(BoeReport {
        aprt: point(Target::Aprt)?,
        aprt_ci: boe_ci(input, Target::Aprt)?,
        raprt: point(Target::Raprt)?,
        raprt_ci: boe_ci(input, Target::Raprt)?,
        z: input.z(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_att() {
        assert_eq!(boe_point(0.0, 0.4, Target::Aprt).unwrap(), 0.0);
        assert_eq!(boe_point(0.0, 0.4, Target::Raprt).unwrap(), 0.0);
        assert_eq!(boe_point(-0.1, 0.4, Target::Aprt).unwrap_err().code(), "NEGATIVE_ATT");
    }

    #[test]
    fn degenerate_interval() {
        let mut inp = BoeInput::new(0.1, 0.0, 0.4, 0.4, 0.05);
        inp.q = Some(0.4);
        for t in Target::BOTH {
            let p = boe_point(0.1, 0.4, t).unwrap();
            let (lo, hi) = boe_ci(&inp, t).unwrap();
            assert!((lo - p).abs() < 1e-15 && (hi - p).abs() < 1e-15);
        }
    }

    #[test]
    fn interior_minimum_when_se_dominates() {
        // att = 0: the pointwise lower end -c / q is smallest at q_lower.
        let inp = BoeInput::new(0.0, 0.05, 0.1, 0.3, 0.05);
        let c = inp.z() * 0.05;
        let (lo, _) = boe_ci(&inp, Target::Aprt).unwrap();
        assert!((lo + c / 0.1).abs() < 1e-12);
    }

    #[test]
    fn q_interval_truncation_and_shrinkage() {
        let (_, hi) = q_interval_from_counts(50, 50, 0.95).unwrap();
        assert!(hi < 1.0);
        let (a, b) = q_interval(0.4, 100.0, 0.95);
        let (c, d) = q_interval(0.4, 1e6, 0.95);
        assert!(d - c < (b - a) / 50.0);
    }
}

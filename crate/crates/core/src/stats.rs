//! Numerical helpers: normal quantiles, least squares, robust covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Inverse standard normal CDF (Wichura's AS 241, relative accuracy ~1e-16).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided critical value `z_{1-alpha/2}`.
pub fn two_sided_z(alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha / 2.0)
}

pub fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 divisor).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Ordinary least squares fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub resid: DVector<f64>,
}

pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficientX("X'X is not positive definite".into()))?;
    let coef = chol.solve(&xty);
    let xtx_inv = chol.inverse();
    // Cholesky succeeds on numerically singular matrices with tiny pivots.
    let scale = xtx.diagonal().amax().max(1.0);
    let min_pivot = chol
        .l()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot * min_pivot <= 1e-10 * scale {
        return Err(Error::RankDeficientX(format!(
            "smallest pivot {min_pivot:e} relative to scale {scale:e}"
        )));
    }
    let resid = y - x * &coef;
    Ok(OlsFit {
        coef,
        xtx_inv,
        resid,
    })
}

/// Map arbitrary cluster labels to dense indices `0..G`, first-seen order.
pub fn dense_clusters<T: std::hash::Hash + Eq + Clone>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        let next = map.len();
        let id = *map.entry(l.clone()).or_insert(next);
        out.push(id);
    }
    let g = map.len();
    (out, g)
}

/// Cluster-robust sandwich `(X'X)^-1 (sum_g s_g s_g') (X'X)^-1 * G/(G-1)`
/// where `s_g` sums `x_r e_r` over the rows of cluster `g`.
pub fn cluster_robust_cov(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    xtx_inv: &DMatrix<f64>,
    row_cluster: &[usize],
    n_clusters: usize,
) -> DMatrix<f64> {
    let k = x.ncols();
    let mut sums = DMatrix::<f64>::zeros(n_clusters, k);
    for r in 0..x.nrows() {
        let g = row_cluster[r];
        for c in 0..k {
            sums[(g, c)] += x[(r, c)] * resid[r];
        }
    }
    let meat = sums.transpose() * &sums;
    let factor = small_cluster_factor(n_clusters);
    xtx_inv * meat * xtx_inv * factor
}

pub(crate) fn small_cluster_factor(g: usize) -> f64 {
    if g > 1 {
        g as f64 / (g as f64 - 1.0)
    } else {
        1.0
    }
}

/// Variance of a sample mean of per-unit influence values, `sum_g (sum_i psi_i)^2 / n^2`,
/// with the `G/(G-1)` factor applied when `small_sample` is set.
pub fn influence_variance(
    psi: &[f64],
    unit_cluster: &[usize],
    n_clusters: usize,
    small_sample: bool,
) -> f64 {
    let n = psi.len() as f64;
    let mut sums = vec![0.0; n_clusters];
    for (p, &g) in psi.iter().zip(unit_cluster) {
        sums[g] += p;
    }
    let total: f64 = sums.iter().map(|s| s * s).sum();
    let factor = if small_sample {
        small_cluster_factor(n_clusters)
    } else {
        1.0
    };
    total / (n * n) * factor
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn quantile_matches_reference_values() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(0.9875) - 2.241_402_727_604_947).abs() < 1e-12);
        assert!((normal_quantile(0.23) + 0.738_846_849_185_213_7).abs() < 1e-14);
        let reference = Normal::new(0.0, 1.0).unwrap();
        for &p in &[1e-12, 1e-6, 0.001, 0.02, 0.3, 0.7, 0.98, 0.999_999] {
            let z = normal_quantile(p);
            assert!((reference.cdf(z) - p).abs() < 1e-9 * p.max(1e-3), "p={p}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let e = (normal_cdf(normal_quantile(p)) - p).abs();
            assert!(e < 1e-9 * p.min(1.0 - p), "p={p} err={e:e}");
        }
    }

    #[test]
    fn ols_rejects_collinear_design() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        assert!(matches!(ols(&x, &y), Err(Error::RankDeficientX(_))));
    }

    #[test]
    fn dense_clusters_first_seen() {
        let (ids, g) = dense_clusters(&["b", "a", "b", "c"]);
        assert_eq!(ids, vec![0, 1, 0, 2]);
        assert_eq!(g, 3);
    }
}

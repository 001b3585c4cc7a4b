use std::io::Write;

use approx::assert_relative_eq;
use persuasion::boe::{boe_ci, q_interval_from_counts, BoeInput};
use persuasion::bounds::aggregate_sharp_bounds;
use persuasion::dataset::{load_two_period_csv, to_cells, StaggeredPanel, StaggeredUnit, TwoPeriodPanel, TwoPeriodSchema, Unit};
use persuasion::nuisance::{fit_logistic, fit_nuisance, NuisanceConfig, NuisanceMethod};
use persuasion::semipar::{PsiEvaluator, Link};
use persuasion::sim::{
    gen_two_period_with, oracle_two_period, rng_for, Affine, CovariateLaw, TwoPeriodDgp,
};
use persuasion::staggered::{espr, StaggeredEstimator};
use persuasion::stats::logistic;
use persuasion::twoperiod_reg::{fit_two_way_fe, fit_two_way_fe_with_cov, rate_from_fe};
use persuasion::Target;
use rand::Rng;

fn discrete_dgp(backlash_rate: f64) -> TwoPeriodDgp {
    TwoPeriodDgp {
        covariates: CovariateLaw::Discrete {
            values: vec![vec![0.0], vec![1.0], vec![2.0]],
            probs: vec![0.5, 0.3, 0.2],
        },
        index: vec![0.9],
        propensity: vec![-0.5, 0.6],
        g: [Affine { intercept: 0.15, slope: 0.1 }, Affine { intercept: 0.2, slope: 0.2 }],
        h: [Affine::constant(0.0), Affine { intercept: 0.05, slope: 0.1 }],
        persuasion: Affine { intercept: 0.25, slope: 0.3 },
        backlash: backlash_rate > 0.0,
        backlash_rate,
        trend_violation: 0.0,
        persistence: 0.7,
        seed: 21,
    }
}

#[test]
fn logistic_recovers_coefficients() {
    let mut rng = rng_for(42, 0);
    let n = 50_000;
    let x: Vec<[f64; 1]> = (0..n).map(|_| [rng.random_range(-2.0..2.0)]).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|x| rng.random_bool(logistic(0.5 - 1.0 * x[0])) as u8 as f64)
        .collect();
    let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
    let fit = fit_logistic(&xs, &y, "test").unwrap();
    assert!(fit.converged);
    assert!((fit.coef[0] - 0.5).abs() < 0.05, "{:?}", fit.coef);
    assert!((fit.coef[1] + 1.0).abs() < 0.05, "{:?}", fit.coef);
}

#[test]
fn csv_load_and_missing_column() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "y0,y1,d1,age").unwrap();
    writeln!(f, "0,1,1,30").unwrap();
    writeln!(f, "1,1,0,NA").unwrap();
    writeln!(f, "0,0,0,41").unwrap();
    writeln!(f, "1,0,1,25").unwrap();
    f.flush().unwrap();
    let mut schema = TwoPeriodSchema::default();
    schema.x = vec!["age".into()];
    let panel = load_two_period_csv(f.path(), &schema).unwrap();
    assert_eq!(panel.n(), 3);
    assert_eq!(panel.dropped_rows(), 1);
    schema.x = vec!["income".into()];
    let err = load_two_period_csv(f.path(), &schema).unwrap_err();
    assert_eq!(err.code(), "MISSING_COLUMN");
}

#[test]
fn cell_means_match_table_and_psi_formula() {
    let (panel, _) = gen_two_period_with(&discrete_dgp(0.0), 3000, &mut rng_for(1, 0)).unwrap();
    let fit = fit_nuisance(&panel, &NuisanceConfig::new(NuisanceMethod::CellMeans)).unwrap();
    let table = to_cells(&panel, true, 20).unwrap();
    let eval = PsiEvaluator::new(Link::Identity, &fit);
    for level in table.level_keys() {
        let x = vec![table.levels[0][level[0]]];
        for t in 0..2 {
            for d in 0..2u8 {
                let want = table.mean(t, d, &level).unwrap();
                assert_relative_eq!(fit.predict_pi(t, d as usize, &x).unwrap(), want, epsilon = 1e-15);
            }
        }
        let m = |t, d| table.mean(t, d, &level).unwrap();
        let want = (m(0, 1) + m(1, 0) - m(0, 0)).clamp(0.0, 1.0);
        assert_relative_eq!(eval.psi(&x).unwrap(), want, epsilon = 1e-15);
    }
}

#[test]
fn aggregate_bounds_match_table_formula() {
    let (panel, _) = gen_two_period_with(&discrete_dgp(0.2), 4000, &mut rng_for(2, 0)).unwrap();
    let fit = fit_nuisance(&panel, &NuisanceConfig::new(NuisanceMethod::CellMeans)).unwrap();
    let got = aggregate_sharp_bounds(&panel, &PsiEvaluator::new(Link::Identity, &fit)).unwrap();
    let table = to_cells(&panel, true, 20).unwrap();
    let (mut lo, mut hi, mut den, mut rden) = (0.0, 0.0, 0.0, 0.0);
    for level in table.level_keys() {
        let w = table.arm_count(1, &level) as f64;
        let m = |t, d| table.mean(t, d, &level).unwrap();
        let psi = (m(0, 1) + m(1, 0) - m(0, 0)).clamp(0.0, 1.0);
        let pi11 = m(1, 1);
        lo += w * if psi <= pi11 { pi11 - psi } else { 0.0 };
        hi += w * if psi <= 1.0 - pi11 { pi11 } else { 1.0 - psi };
        den += w * (1.0 - psi);
        rden += w * pi11;
    }
    assert_relative_eq!(got.theta_star_l, lo / den, epsilon = 1e-12);
    assert_relative_eq!(got.theta_star_u, hi / den, epsilon = 1e-12);
    assert_relative_eq!(got.rtheta_star_l, lo / rden, epsilon = 1e-12);
    assert_relative_eq!(got.rtheta_star_u, hi / rden, epsilon = 1e-12);
}

#[test]
fn cross_fitting_ignores_unit_order() {
    let (panel, _) = gen_two_period_with(&discrete_dgp(0.0), 600, &mut rng_for(3, 0)).unwrap();
    let cfg = NuisanceConfig::new(NuisanceMethod::Logistic).cross_fit(5, 17);
    let a = fit_nuisance(&panel, &cfg).unwrap();
    let mut reversed: Vec<Unit> = panel.units().to_vec();
    reversed.reverse();
    let b = fit_nuisance(&TwoPeriodPanel::new(reversed).unwrap(), &cfg).unwrap();
    // Identical units may trade folds, and fits see rows in a different
    // order, so compare sorted predictions up to summation noise.
    let sorted = |f: &persuasion::nuisance::NuisanceFit| {
        let mut v: Vec<[f64; 5]> = (0..f.values.n())
            .map(|i| {
                let pi = &f.values.pi;
                [f.values.p[i], pi[0][0][i], pi[0][1][i], pi[1][0][i], pi[1][1][i]]
            })
            .collect();
        v.sort_by(|x, y| x.iter().zip(y).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        v
    };
    for (x, y) in sorted(&a).iter().zip(&sorted(&b)) {
        for k in 0..5 {
            assert_relative_eq!(x[k], y[k], epsilon = 1e-10);
        }
    }
}

#[test]
fn oracle_matches_enumeration() {
    let dgp = discrete_dgp(0.15);
    let o = oracle_two_period(&dgp).unwrap();
    let CovariateLaw::Discrete { values, probs } = &dgp.covariates else { unreachable!() };
    // Mass of each (Y1(0), Y1(1)) cell among the treated.
    let mut cell = [0.0; 4];
    for (x, w) in values.iter().zip(probs) {
        let u = logistic(0.9 * x[0]);
        let p = logistic(-0.5 + 0.6 * x[0]);
        let tau = dgp.g[1].at(u) + dgp.h[1].at(u);
        let theta = dgp.persuasion.at(u);
        let b = dgp.backlash_rate;
        let m = w * p;
        cell[0] += m * (1.0 - tau) * (1.0 - theta);
        cell[1] += m * (1.0 - tau) * theta;
        cell[2] += m * tau * b;
        cell[3] += m * tau * (1.0 - b);
    }
    let att = (cell[1] - cell[2]) / cell.iter().sum::<f64>();
    assert_relative_eq!(o.theta.unwrap(), cell[1] / (cell[0] + cell[1]), epsilon = 1e-14);
    assert_relative_eq!(o.rtheta.unwrap(), cell[1] / (cell[1] + cell[3]), epsilon = 1e-14);
    assert_relative_eq!(o.att.unwrap(), att, epsilon = 1e-14);
    assert_relative_eq!(o.theta_l.unwrap(), (cell[1] - cell[2]) / (cell[0] + cell[1]), epsilon = 1e-14);
    assert!(o.theta_l.unwrap() < o.theta.unwrap());
}

#[test]
fn sampled_joint_matches_law() {
    let dgp = TwoPeriodDgp::from_treated_joint([0.3, 0.4, 0.1, 0.2], 0.5).unwrap();
    let (panel, pots) = gen_two_period_with(&dgp, 1_000_000, &mut rng_for(4, 0)).unwrap();
    let mut counts = [0usize; 4];
    let mut n1 = 0;
    for (u, p) in panel.units().iter().zip(&pots) {
        if u.treated() {
            n1 += 1;
            counts[(2 * p.y1_untreated + p.y1_treated) as usize] += 1;
        }
    }
    for (k, &want) in [0.3, 0.4, 0.1, 0.2].iter().enumerate() {
        let freq = counts[k] as f64 / n1 as f64;
        let se = (want * (1.0 - want) / n1 as f64).sqrt();
        assert!((freq - want).abs() < 3.0 * se, "cell {k}: {freq} vs {want}");
    }
}

#[test]
fn no_backlash_means_no_backlash_draws() {
    let (_, pots) = gen_two_period_with(&discrete_dgp(0.0), 50_000, &mut rng_for(5, 0)).unwrap();
    assert!(pots.iter().all(|p| p.y1_treated >= p.y1_untreated));
}

#[test]
fn boe_interval_is_conservative() {
    let dgp = discrete_dgp(0.0);
    let truth = oracle_two_period(&dgp).unwrap().theta.unwrap();
    let reps = 2000;
    let mut covered = 0;
    for rep in 0..reps {
        let (panel, _) = gen_two_period_with(&dgp, 2000, &mut rng_for(77, rep + 1)).unwrap();
        let fe = fit_two_way_fe_with_cov(&panel).unwrap();
        let treated: Vec<&Unit> = panel.units().iter().filter(|u| u.treated()).collect();
        let zeros = treated.iter().filter(|u| u.y1 == 0).count() as u64;
        let (ql, qu) = q_interval_from_counts(zeros, treated.len() as u64, 0.975).unwrap();
        let input = BoeInput::new(fe.coef.gamma, fe.cov[(3, 3)].sqrt(), ql, qu, 0.05);
        let (lo, hi) = boe_ci(&input, Target::Aprt).unwrap();
        covered += (lo <= truth && truth <= hi) as usize;
    }
    let rate = covered as f64 / reps as f64;
    assert!(rate >= 0.95, "coverage {rate}");
}

#[test]
fn single_period_staggered_equals_two_period() {
    let mut rng = rng_for(6, 0);
    let units: Vec<StaggeredUnit> = (0..300)
        .map(|i| {
            let treated = i % 2 == 0;
            let y0 = rng.random_bool(0.3) as u8;
            let y1 = rng.random_bool(if treated { 0.6 } else { 0.35 }) as u8;
            StaggeredUnit {
                y: vec![y0, y1],
                s: treated.then_some(1),
                x: Vec::new(),
                cluster: None,
            }
        })
        .collect();
    let two = TwoPeriodPanel::new(
        units
            .iter()
            .map(|u| Unit::new(u.y[0], u.y[1], u.s.is_some() as u8))
            .collect(),
    )
    .unwrap();
    let panel = StaggeredPanel::new(units, 1).unwrap();
    let r = espr(&panel, 0, StaggeredEstimator::Regression, None, 0.05).unwrap();
    let fe = rate_from_fe(&fit_two_way_fe(&two).unwrap(), &two, Target::Aprt, 0.05).unwrap();
    assert_eq!(r.theta, fe.point);
    assert_relative_eq!(r.se, fe.se, epsilon = 1e-10);
}

#[test]
fn espr_is_not_a_mean_of_ratios() {
    let mut rng = rng_for(7, 0);
    let units: Vec<StaggeredUnit> = (0..900)
        .map(|i| {
            let s = match i % 3 {
                0 => None,
                1 => Some(1),
                _ => Some(2),
            };
            let y = (0..3)
                .map(|t| {
                    let lift = match s {
                        Some(1) if t >= 1 => 0.2,
                        Some(2) if t >= 2 => 0.5,
                        _ => 0.0,
                    };
                    rng.random_bool(0.2 + 0.05 * t as f64 + lift) as u8
                })
                .collect();
            StaggeredUnit { y, s, x: Vec::new(), cluster: None }
        })
        .collect();
    let panel = StaggeredPanel::new(units, 2).unwrap();
    let r = espr(&panel, 0, StaggeredEstimator::Regression, None, 0.05).unwrap();
    let num: f64 = r.weights.iter().zip(&r.components).map(|((_, p), c)| p * c.num).sum();
    let den: f64 = r.weights.iter().zip(&r.components).map(|((_, p), c)| p * c.den).sum();
    assert_relative_eq!(r.numerator, num, epsilon = 1e-15);
    assert_relative_eq!(r.denominator, den, epsilon = 1e-15);
    assert_relative_eq!(r.theta, num / den, epsilon = 1e-15);
    let total: f64 = r.weights.iter().map(|w| w.1).sum();
    let mean_of_ratios: f64 = r.weights.iter().zip(&r.components).map(|((_, p), c)| p * c.theta).sum::<f64>() / total;
    assert!((r.theta - mean_of_ratios).abs() > 1e-6);
}

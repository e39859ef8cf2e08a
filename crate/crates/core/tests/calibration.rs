mod common;

use std::sync::Arc;

use common::lhs;
use gpemu_core::calibration::ThetaPrior;
use gpemu_core::priors::PriorSpec;
use gpemu_core::{
    calib_predict, calibrate, fit, CalibrationProblem, CorrelationFamily, DiscrepancySpec, Error, FitConfig,
    KernelChoice, McmcChain, McmcConfig, Simulator, TrendBasis,
};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn grid(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64)
}

fn noisy(x: &DMatrix<f64>, f: impl Fn(f64) -> f64, sd: f64, seed: u64) -> DVector<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sd).unwrap();
    DVector::from_fn(x.nrows(), |i, _| f(x[(i, 0)]) + normal.sample(&mut rng))
}

fn slope() -> Simulator {
    Simulator::direct(|x, t| Ok(t[0] * x[0]))
}

fn linear(n: usize, sd: f64, seed: u64) -> CalibrationProblem {
    let x = grid(n);
    let y = noisy(&x, |v| 2.0 * v, sd, seed);
    CalibrationProblem::new(x, y, slope(), vec![(0.0, 5.0)], None, PriorSpec::Flat).unwrap()
}

fn mcmc(iterations: usize, seed: u64) -> McmcConfig {
    McmcConfig {
        iterations,
        burn_in: iterations / 5,
        seed,
        ..McmcConfig::default()
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn theta_stats(chain: &McmcChain) -> (f64, f64) {
    mean_sd(&chain.theta_column(0))
}

fn ks_uniform(mut v: Vec<f64>, lo: f64, hi: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn linear_truth_is_recovered_and_concentrates_with_n() {
    let small = calibrate(&linear(30, 0.05, 1), &mcmc(10_000, 1)).unwrap();
    let large = calibrate(&linear(120, 0.05, 2), &mcmc(10_000, 2)).unwrap();
    for chain in [&small, &large] {
        let (m, sd) = theta_stats(chain);
        assert!((m - 2.0).abs() < 3.0 * sd, "{m} ± {sd}");
        assert!((0.1..=0.6).contains(&chain.acceptance_theta), "{}", chain.acceptance_theta);
        assert!((0.1..=0.6).contains(&chain.acceptance_kernel), "{}", chain.acceptance_kernel);
    }
    // n grows fourfold, so the SD should roughly halve
    let ratio = theta_stats(&small).1 / theta_stats(&large).1;
    assert!((1.5..2.7).contains(&ratio), "{ratio}");
}

#[test]
fn prior_only_run_is_uniform_on_the_bounds() {
    let problem = linear(30, 0.05, 3).with_prior_only(true);
    let chain = calibrate(&problem, &mcmc(12_500, 3)).unwrap();
    assert_eq!(chain.len(), 10_000);
    let d = ks_uniform(chain.theta_column(0), 0.0, 5.0);
    assert!(d < 0.05, "KS {d}");
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let x = grid(15);
    let y = noisy(&x, |v| 2.0 * v + 0.2 * (5.0 * v).sin(), 0.05, 4);
    let problem = CalibrationProblem::new(
        x,
        y,
        slope(),
        vec![(0.0, 5.0)],
        Some(DiscrepancySpec::isotropic(CorrelationFamily::matern_5_2())),
        PriorSpec::jr(),
    )
    .unwrap();
    let a = calibrate(&problem, &mcmc(2_000, 5)).unwrap();
    let b = calibrate(&problem, &mcmc(2_000, 5)).unwrap();
    assert_eq!(a, b);
    let bits = |c: &McmcChain| c.log_post.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let c = calibrate(&problem, &mcmc(2_000, 6)).unwrap();
    assert_ne!(a.theta, c.theta);
}

#[test]
fn constant_shift_of_the_theta_prior_changes_no_decision() {
    let prior = |shift: f64| ThetaPrior::Custom(Arc::new(move |t: &[f64]| -0.5 * (t[0] - 1.0).powi(2) + shift));
    let a = calibrate(&linear(30, 0.05, 7).with_theta_prior(prior(0.0)), &mcmc(4_000, 8)).unwrap();
    let b = calibrate(&linear(30, 0.05, 7).with_theta_prior(prior(37.25)), &mcmc(4_000, 8)).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.kernel, b.kernel);
    assert_eq!(a.acceptance_theta, b.acceptance_theta);
}

#[test]
fn chain_histogram_matches_a_one_dimensional_target() {
    // two-component mixture on [0, 3], sampled through the θ prior alone
    let log_target = |t: f64| {
        let a = (-0.5 * ((t - 0.8) / 0.25).powi(2)).exp();
        let b = 0.6 * (-0.5 * ((t - 2.1) / 0.4).powi(2)).exp();
        (a + b).ln()
    };
    let x = grid(5);
    let y = DVector::zeros(5);
    let problem = CalibrationProblem::new(x, y, slope(), vec![(0.0, 3.0)], None, PriorSpec::Flat)
        .unwrap()
        .with_theta_prior(ThetaPrior::Custom(Arc::new(move |t: &[f64]| log_target(t[0]))))
        .with_prior_only(true);
    let cfg = McmcConfig {
        iterations: 105_000,
        burn_in: 5_000,
        seed: 9,
        ..McmcConfig::default()
    };
    let chain = calibrate(&problem, &cfg).unwrap();
    assert_eq!(chain.len(), 100_000);

    let bins = 30;
    let width = 3.0 / bins as f64;
    let mut want: Vec<f64> = (0..bins)
        .map(|b| {
            // midpoint rule on a fine sub-grid of each bin
            (0..200)
                .map(|k| log_target(b as f64 * width + (k as f64 + 0.5) * width / 200.0).exp())
                .sum::<f64>()
        })
        .collect();
    let total: f64 = want.iter().sum();
    want.iter_mut().for_each(|w| *w /= total);
    let mut got = vec![0.0; bins];
    for t in chain.theta_column(0) {
        got[((t / width) as usize).min(bins - 1)] += 1.0 / chain.len() as f64;
    }
    let tv: f64 = 0.5 * got.iter().zip(&want).map(|(g, w)| (g - w).abs()).sum::<f64>();
    assert!(tv < 0.05, "TV {tv}");
}

#[test]
fn posterior_sd_falls_with_the_noise_level() {
    let sds: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .enumerate()
        .map(|(k, &sd)| theta_stats(&calibrate(&linear(30, sd, 10 + k as u64), &mcmc(8_000, 20)).unwrap()).1)
        .collect();
    assert!(sds[0] > sds[1] && sds[1] > sds[2], "{sds:?}");
}

#[test]
fn emulated_simulator_agrees_with_direct() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut design = lhs(60, 2, &mut rng);
    design.column_mut(1).scale_mut(4.0);
    let f = DVector::from_fn(60, |i, _| design[(i, 0)] * design[(i, 1)]);
    let kernel = KernelChoice::separable(vec![CorrelationFamily::matern_5_2(); 2]);
    let (model, _) = fit(&design, &f, TrendBasis::Linear, &kernel, &FitConfig::default()).unwrap();

    let x = grid(20);
    let y = noisy(&x, |v| 2.0 * v, 0.05, 12);
    let problem = |sim| CalibrationProblem::new(x.clone(), y.clone(), sim, vec![(0.0, 4.0)], None, PriorSpec::Flat).unwrap();
    let direct = calibrate(&problem(slope()), &mcmc(8_000, 13)).unwrap();
    let emulated = calibrate(&problem(Simulator::emulated(model)), &mcmc(8_000, 13)).unwrap();
    let (md, sd) = theta_stats(&direct);
    let (me, se) = theta_stats(&emulated);
    assert!((md - me).abs() < 2.0 * (sd * sd + se * se).sqrt(), "{md} ± {sd} vs {me} ± {se}");
}

#[test]
fn prediction_without_discrepancy_is_the_simulator_mixture() {
    let problem = linear(30, 0.05, 14);
    let chain = calibrate(&problem, &mcmc(3_000, 14)).unwrap();
    let xstar = DMatrix::from_column_slice(3, 1, &[0.1, 0.55, 1.4]);
    let preds = calib_predict(&problem, &chain, &xstar).unwrap();
    for (i, p) in preds.iter().enumerate() {
        let values: Vec<f64> = chain.theta.iter().map(|t| t[0] * xstar[(i, 0)]).collect();
        let (m, sd) = mean_sd(&values);
        assert!((p.mean - m).abs() < 1e-12 * m.abs().max(1.0));
        assert!((p.sd - sd).abs() < 1e-9 * sd.max(1e-12));
        assert!(p.lo <= p.mean && p.mean <= p.hi);
    }
}

fn with_discrepancy(y: DVector<f64>, x: DMatrix<f64>) -> CalibrationProblem {
    CalibrationProblem::new(
        x,
        y,
        slope(),
        vec![(0.0, 5.0)],
        Some(DiscrepancySpec::isotropic(CorrelationFamily::matern_5_2())),
        PriorSpec::jr(),
    )
    .unwrap()
}

#[test]
fn discrepancy_pulls_predictions_towards_the_field_data() {
    let x = grid(20);
    let y = noisy(&x, |v| 2.0 * v + 0.3 * (6.0 * v).sin(), 0.01, 15);
    let problem = with_discrepancy(y.clone(), x.clone());
    let chain = calibrate(&problem, &mcmc(6_000, 15)).unwrap();
    let theta_bar = theta_stats(&chain).0;
    let preds = calib_predict(&problem, &chain, &x).unwrap();
    for (i, p) in preds.iter().enumerate() {
        let sim_err = (theta_bar * x[(i, 0)] - y[i]).abs();
        assert!((p.mean - y[i]).abs() < sim_err, "row {i}: {} vs {sim_err}", (p.mean - y[i]).abs());
    }
}

#[test]
fn constant_discrepancy_is_absorbed() {
    let x = grid(30);
    let y = noisy(&x, |v| 2.0 * v + 0.5, 0.05, 16);
    let problem = with_discrepancy(y, x.clone());
    let chain = calibrate(&problem, &mcmc(10_000, 16)).unwrap();
    let (m, sd) = theta_stats(&chain);
    assert!((m - 2.0).abs() < 3.0 * sd, "{m} ± {sd}");
    assert!((0.1..=0.6).contains(&chain.acceptance_theta), "{}", chain.acceptance_theta);
    assert!((0.1..=0.6).contains(&chain.acceptance_kernel), "{}", chain.acceptance_kernel);
    // averaged over the field inputs, the offset's spread is dominated by θ·x̄
    let preds = calib_predict(&problem, &chain, &x).unwrap();
    let xbar = x.mean();
    let offset = preds.iter().map(|p| p.mean).sum::<f64>() / preds.len() as f64 - m * xbar;
    assert!((offset - 0.5).abs() < 2.0 * sd * xbar, "offset {offset}, θ {m} ± {sd}");
}

#[test]
fn frozen_sampler_is_reported() {
    // the simulator only succeeds at the starting point, so no θ move is ever accepted
    let x = grid(5);
    let y = DVector::from_element(5, 1.0);
    let sim = Simulator::direct(|_, t| if t[0] == 1.0 { Ok(1.0) } else { Err("outside the tabulated run".into()) });
    let problem = CalibrationProblem::new(x, y, sim, vec![(0.0, 2.0)], None, PriorSpec::Flat).unwrap();
    let err = calibrate(&problem, &mcmc(500, 17)).unwrap_err();
    assert!(matches!(err, Error::Sampler(_)), "{err}");
    assert!(problem.simulator_failures() > 0);
}

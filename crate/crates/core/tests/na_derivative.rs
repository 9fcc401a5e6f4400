mod common;

use std::sync::Arc;

use common::rel_l2;
use jumpsmp::derivative::{
    coefficient_covariance, duality_gap, estimate_derivative, representation_residual, DerivativeField, TargetVariable,
};
use jumpsmp::dissecting::{build_dissecting_system, DissectingSystem};
use jumpsmp::noise::{sample_ensemble, Cell, MarkSpace, NoiseModel, PathEnsemble, PredictableField, TimeGrid};
use jumpsmp::regression::{Observable, RegressionBasis};
use jumpsmp::rng::PathStream;
use proptest::prelude::*;

type Functional = fn(&PathEnsemble, usize) -> f64;

fn setup(model: &NoiseModel, n: usize, seed: u64, level: usize) -> (PathEnsemble, DissectingSystem) {
    let g = TimeGrid::new(1.0, 16).unwrap();
    let marks = MarkSpace::singleton();
    let e = sample_ensemble(model, &g, &marks, n, seed).unwrap();
    let s = build_dissecting_system(&g, &marks, level).unwrap();
    (e, s)
}

fn quadratic(o: Observable) -> Arc<RegressionBasis> {
    Arc::new(RegressionBasis::polynomial(&[o], 2))
}

fn fit(
    e: &PathEnsemble,
    s: &DissectingSystem,
    level: usize,
    xi: Vec<f64>,
    basis: Arc<RegressionBasis>,
) -> DerivativeField {
    estimate_derivative(e, None, &TargetVariable::new(xi).unwrap(), s, level, basis).unwrap()
}

fn cell_starts(f: &DerivativeField) -> Vec<usize> {
    f.fits.iter().map(|c| c.cell.start).collect()
}

#[test]
fn terminal_brownian_value_has_unit_field() {
    let (e, s) = setup(&NoiseModel::Brownian, 20_000, 1, 3);
    let xi = (0..e.n_paths()).map(|i| e.running_noise(i, 16, 0)).collect();
    let f = fit(&e, &s, 3, xi, quadratic(Observable::RunningNoise(0)));
    let rmse = (f.fitted.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / f.fitted.len() as f64).sqrt();
    assert!(rmse < 0.05, "{rmse}");
}

#[test]
fn squared_brownian_field_is_twice_running_value() {
    let (e, s) = setup(&NoiseModel::Brownian, 40_000, 2, 3);
    let xi = (0..e.n_paths()).map(|i| e.running_noise(i, 16, 0).powi(2)).collect();
    let f = fit(&e, &s, 3, xi, quadratic(Observable::RunningNoise(0)));
    let starts = cell_starts(&f);
    let oracle: Vec<f64> = (0..e.n_paths())
        .flat_map(|i| starts.iter().map(move |&k| (i, k)))
        .map(|(i, k)| 2.0 * e.running_noise(i, k, 0))
        .collect();
    assert!(rel_l2(&f.fitted, &oracle) <= 0.1);
}

#[test]
fn squared_count_field_matches_closed_form() {
    let lambda = 1.5;
    let model = NoiseModel::CompensatedPoisson {
        intensities: vec![lambda],
    };
    let (e, s) = setup(&model, 40_000, 3, 2);
    let xi = (0..e.n_paths())
        .map(|i| (e.running_count(i, 16, 0) as f64).powi(2))
        .collect();
    let f = fit(&e, &s, 2, xi, quadratic(Observable::RunningCount(0)));
    let starts = cell_starts(&f);
    let dt = e.grid().dt();
    let oracle: Vec<f64> = (0..e.n_paths())
        .flat_map(|i| starts.iter().map(move |&k| (i, k)))
        .map(|(i, k)| 2.0 * (e.running_count(i, k, 0) as f64 + lambda * (1.0 - k as f64 * dt)) + 1.0)
        .collect();
    assert!(rel_l2(&f.fitted, &oracle) <= 0.1);
}

#[test]
fn duality_examples() {
    let poisson = NoiseModel::CompensatedPoisson { intensities: vec![2.0] };
    let cases: [(NoiseModel, Functional, f64); 3] = [
        (poisson, |e, i| e.running_count(i, 16, 0) as f64, 2.0),
        (NoiseModel::Brownian, |e, i| e.running_noise(i, 16, 0), 1.0),
        (NoiseModel::Brownian, |_, _| -1.25, 0.0),
    ];
    for (k, (model, xi, expected)) in cases.into_iter().enumerate() {
        let (main, s) = setup(&model, 30_000, 10 + k as u64, 3);
        let (other, _) = setup(&model, 30_000, 20 + k as u64, 3);
        let f = fit(
            &other,
            &s,
            3,
            (0..other.n_paths()).map(|i| xi(&other, i)).collect(),
            quadratic(Observable::RunningNoise(0)),
        );
        let target = TargetVariable::new((0..main.n_paths()).map(|i| xi(&main, i)).collect()).unwrap();
        let r = duality_gap(&main, None, &target, &PredictableField::constant(&main, 1.0), &f).unwrap();
        assert!(r.fresh);
        let combined = (r.lhs.std_error.powi(2) + r.rhs.std_error.powi(2)).sqrt();
        assert!((r.lhs.mean - r.rhs.mean).abs() <= 4.0 * combined, "case {k}: {r:?}");
        assert!(
            (r.lhs.mean - expected).abs() <= 4.0 * r.lhs.std_error,
            "case {k}: {r:?}"
        );
    }
}

#[test]
fn single_cell_target_has_small_residual() {
    let (e, s) = setup(&NoiseModel::Brownian, 20_000, 4, 2);
    let cell = Cell::single(4, 8, 0).unwrap();
    let xi: Vec<f64> = (0..e.n_paths()).map(|i| e.cell_noise(i, &cell)).collect();
    let f = fit(&e, &s, 2, xi.clone(), quadratic(Observable::RunningNoise(0)));
    let r = representation_residual(&e, None, &TargetVariable::new(xi).unwrap(), &f, None).unwrap();
    assert!(r.residual_variance < 1e-2 * r.target_variance, "{r:?}");
}

#[test]
fn independent_target_has_null_field() {
    let (e, s) = setup(&NoiseModel::Brownian, 20_000, 5, 2);
    let (fit_e, _) = setup(&NoiseModel::Brownian, 20_000, 6, 2);
    let noise = |e: &PathEnsemble, seed: u64| -> Vec<f64> {
        (0..e.n_paths())
            .map(|i| PathStream::new(seed, i).next_cell().normal())
            .collect()
    };
    let fit_xi = TargetVariable::new(noise(&fit_e, 77)).unwrap();
    let f = estimate_derivative(&fit_e, None, &fit_xi, &s, 2, quadratic(Observable::RunningNoise(0))).unwrap();
    let values = f.evaluate_on(&e, None).unwrap();
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
    assert!(rms < 0.1, "{rms}");
    let cov = coefficient_covariance(&fit_e, None, &fit_xi, &f).unwrap();
    let xi = TargetVariable::new(noise(&e, 78)).unwrap();
    let r = representation_residual(&e, None, &xi, &f, Some(&cov)).unwrap();
    assert!(
        r.orthogonality_z.iter().all(|z| z.abs() <= 4.0),
        "{:?}",
        r.orthogonality_z
    );
}

#[test]
fn field_recovers_piecewise_integrand() {
    let (e, s) = setup(&NoiseModel::Brownian, 40_000, 7, 2);
    let kappa =
        |e: &PathEnsemble, i: usize, start: usize| 0.5 + (start as f64) / 8.0 - 0.7 * e.running_noise(i, start, 0);
    let cells = s.level(2).unwrap().cells.clone();
    let xi: Vec<f64> = (0..e.n_paths())
        .map(|i| cells.iter().map(|c| kappa(&e, i, c.start) * e.cell_noise(i, c)).sum())
        .collect();
    let f = fit(&e, &s, 2, xi, quadratic(Observable::RunningNoise(0)));
    let oracle: Vec<f64> = (0..e.n_paths())
        .flat_map(|i| cells.iter().map(move |c| (i, c.start)))
        .map(|(i, k)| kappa(&e, i, k))
        .collect();
    let rmse = (f.fitted.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / oracle.len() as f64).sqrt();
    assert!(rmse < 0.05, "{rmse}");
}

#[test]
fn field_ignores_increments_after_the_left_edge() {
    let (e, s) = setup(&NoiseModel::Brownian, 3000, 8, 2);
    let xi = (0..e.n_paths()).map(|i| e.running_noise(i, 16, 0).powi(2)).collect();
    let f = fit(&e, &s, 2, xi, quadratic(Observable::RunningNoise(0)));
    let mut inc = e.increments().to_vec();
    for i in 0..e.n_paths() {
        for k in 12..16 {
            inc[i * 16 + k] = -inc[i * 16 + k] + 0.25;
        }
    }
    let changed = PathEnsemble::from_parts(
        e.model().clone(),
        e.grid().clone(),
        e.marks().clone(),
        e.seed(),
        inc,
        e.intensities().to_vec(),
        None,
    )
    .unwrap();
    let a = f.evaluate_on(&e, None).unwrap();
    let b = f.evaluate_on(&changed, None).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimator_is_exactly_linear(seed in 0u64..500, a in -4i128..5, b in -4i128..5) {
        let (e, s) = setup(&NoiseModel::CompensatedPoisson { intensities: vec![1.0] }, 512, seed, 2);
        let x1: Vec<f64> = (0..e.n_paths()).map(|i| e.running_noise(i, 16, 0)).collect();
        let x2: Vec<f64> = (0..e.n_paths()).map(|i| e.running_count(i, 10, 0) as f64 * 0.5).collect();
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a as f64 * u + b as f64 * v).collect();
        let basis = quadratic(Observable::RunningCount(0));
        let (f1, f2, fc) = (fit(&e, &s, 2, x1, basis.clone()), fit(&e, &s, 2, x2, basis.clone()), fit(&e, &s, 2, combo, basis));
        for ((c1, c2), cc) in f1.fits.iter().zip(&f2.fits).zip(&fc.fits) {
            for ((p, q), r) in c1.exact.iter().zip(&c2.exact).zip(&cc.exact) {
                let low = [p, q, r].iter().filter(|x| x.mantissa != 0).map(|x| x.exponent).min().unwrap_or(0);
                let lift = |x: &jumpsmp::derivative::ExactCoefficient| if x.mantissa == 0 { 0 } else { x.mantissa << (x.exponent - low) };
                prop_assert_eq!(lift(r), a * lift(p) + b * lift(q));
            }
        }
    }
}

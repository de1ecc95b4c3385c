mod common;

use common::*;
use msfr::cv::{cv_mse, CVSpec};
use msfr::init::initialize;
use msfr::scores::{bartlett_scores, ScoreMethod};
use msfr::select::{select, Criterion, GridSpec};
use msfr::sim::{generate_data, generate_truth, run_benchmark, Method, ScenarioSpec};
use msfr::{fit, ConvergenceConfig, ModelDims, MsfrError, StoppingStatistic};

#[test]
fn bic_recovers_scenario_one_dimensions() {
    let spec = ScenarioSpec::scenario(1).unwrap().scaled(2.0);
    let truth = generate_truth(&spec, 3).unwrap();
    let data = generate_data(&truth, &spec, 3).unwrap();
    let grid = GridSpec { q_values: vec![2, 3, 4], qs_values: vec![0, 1, 2], criterion: Criterion::Bic };
    let report = select(&data, &grid, &ConvergenceConfig::default()).unwrap();
    assert_eq!(report.chosen, (3, 1));
    assert_eq!(report.rows.len(), 9);
    assert!(report.chosen_fit().converged);
}

#[test]
fn uneven_specific_dimensions_fit() {
    let mut rng = rng(41);
    let truth = random_params(&mut rng, 10, 1, 2, &[1, 2, 0], 1.0);
    let data = sample_data(&mut rng, &truth, &[200, 200, 200]);
    let dims = ModelDims::for_data(&data, 2, vec![1, 2, 0]);
    let f = fit(&data, &dims, &ConvergenceConfig::default(), initialize(&data, &dims).unwrap()).unwrap();
    assert_eq!(f.params.q_s(), vec![1, 2, 0]);
    assert!(f.converged);
    for s in 0..3 {
        assert!(msfr::linalg::rv_coefficient_psd(&f.params.sigma(s), &truth.sigma(s)).unwrap() > 0.9);
    }
}

#[test]
fn both_stopping_statistics_reach_the_same_optimum() {
    let mut rng = rng(43);
    let truth = random_params(&mut rng, 12, 1, 2, &[1, 1], 1.0);
    let data = sample_data(&mut rng, &truth, &[300, 300]);
    let dims = ModelDims::for_data(&data, 2, vec![1, 1]);
    let run = |statistic| {
        let config = ConvergenceConfig { statistic, ..Default::default() };
        fit(&data, &dims, &config, initialize(&data, &dims).unwrap()).unwrap()
    };
    let (obs, comp) = (run(StoppingStatistic::Observed), run(StoppingStatistic::Complete));
    assert!(obs.converged && comp.converged);
    assert!(
        (obs.observed_loglik - comp.observed_loglik).abs() < 1e-3,
        "{} vs {}",
        obs.observed_loglik,
        comp.observed_loglik
    );
    for s in 0..2 {
        assert!(msfr::linalg::rv_coefficient_psd(&obs.params.sigma(s), &comp.params.sigma(s)).unwrap() > 0.9999);
    }
}

#[test]
fn bartlett_is_exact_without_noise() {
    let mut rng = rng(42);
    let params = random_params(&mut rng, 9, 0, 2, &[1, 2], 1.0);
    let f: Vec<_> = (0..2).map(|_| normal_matrix(&mut rng, 2, 30)).collect();
    let l: Vec<_> = params.lambdas.iter().map(|lam| normal_matrix(&mut rng, lam.ncols(), 30)).collect();
    let x: Vec<_> = (0..2).map(|s| &params.phi * &f[s] + &params.lambdas[s] * &l[s]).collect();
    let sc = bartlett_scores(&x, &params).unwrap();
    for s in 0..2 {
        assert!((&sc.common[s] - &f[s]).amax() < 1e-9);
        assert!((&sc.specific[s] - &l[s]).amax() < 1e-9);
    }
}

#[test]
fn benchmark_is_reproducible() {
    let spec = ScenarioSpec::scenario(1).unwrap().scaled(0.3).with_reps(2).with_seed(5);
    let grid = GridSpec { q_values: vec![2, 3], qs_values: vec![1], criterion: Criterion::Aic };
    let methods = [Method::Msfr, Method::Fr];
    let config = ConvergenceConfig::default();
    let a = run_benchmark(&spec, &methods, &grid, &config).unwrap();
    let b = run_benchmark(&spec, &methods, &grid, &config).unwrap();
    assert_eq!(a.records, b.records);
    assert!(a.failures.is_empty(), "{:?}", a.failures);
    assert_eq!(a.records.len(), 2 * 2 * 2);
    assert!(a
        .records
        .iter()
        .filter(|r| r.method == Method::Fr)
        .all(|r| r.qs_hat == 0 && r.rv.lambdas.iter().all(Option::is_none)));
}

#[test]
fn cv_report_covers_requested_methods() {
    let spec = ScenarioSpec::scenario(1).unwrap().scaled(0.3);
    let truth = generate_truth(&spec, 8).unwrap();
    let data = generate_data(&truth, &spec, 8).unwrap();
    let cv = CVSpec { k: 3, seed: 8, ..Default::default() };
    let methods = [Method::Msfr, Method::Msfa, Method::MsfaLr];
    let report = cv_mse(&data, 3, 1, &ConvergenceConfig::default(), &cv, &methods).unwrap();
    assert_eq!(report.rows.len(), 6);
    for m in methods {
        for sm in [ScoreMethod::Bartlett, ScoreMethod::Thurstone] {
            let v = report.mse(m, sm).unwrap();
            assert!(v.is_finite() && v > 0.0);
        }
    }
    let mut out = Vec::new();
    report.write_table_csv(&mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("method,"));
}

#[test]
fn oversized_grid_is_rejected() {
    let spec = ScenarioSpec::scenario(1).unwrap().scaled(0.2);
    let truth = generate_truth(&spec, 1).unwrap();
    let data = generate_data(&truth, &spec, 1).unwrap();
    let grid = GridSpec { q_values: vec![15], qs_values: vec![4], criterion: Criterion::Bic };
    let err = select(&data, &grid, &ConvergenceConfig::default()).unwrap_err();
    assert!(matches!(err, MsfrError::RankConstraintViolated { .. }));
}

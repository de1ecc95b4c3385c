mod common;

use std::fs;

use common::*;
use msfr::ecm::observed_loglik;
use msfr::init::initialize;
use msfr::io::{load_multistudy, read_params, write_multistudy, write_params};
use msfr::{fit, ConvergenceConfig, ModelDims, MsfrError};

#[test]
fn params_round_trip_preserves_loglik() {
    let mut rng = rng(31);
    let truth = random_params(&mut rng, 8, 2, 2, &[1, 2], 0.8);
    let data = sample_data(&mut rng, &truth, &[80, 120]);
    let dims = ModelDims::for_data(&data, 2, vec![1, 2]);
    let config = ConvergenceConfig { max_iter: 300, ..Default::default() };
    let fitted = fit(&data, &dims, &config, initialize(&data, &dims).unwrap()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_params(dir.path(), &fitted.params).unwrap();
    let back = read_params(dir.path()).unwrap();
    assert_eq!(back, fitted.params);
    let (a, b) = (observed_loglik(&data, &fitted.params).unwrap(), observed_loglik(&data, &back).unwrap());
    assert!((a - b).abs() <= 1e-9 * a.abs());
}

#[test]
fn dataset_round_trip_is_exact() {
    let mut rng = rng(32);
    let truth = random_params(&mut rng, 5, 3, 1, &[1, 1, 1], 1.0);
    let data = sample_data(&mut rng, &truth, &[7, 9, 11]);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_multistudy(dir.path(), &data).unwrap();
    let back = load_multistudy(&manifest).unwrap();
    assert_eq!(back.n_s(), vec![7, 9, 11]);
    for (a, b) in data.studies.iter().zip(&back.studies) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.x, b.x);
        assert_eq!(a.b, b.b);
    }
}

#[test]
fn covariate_free_params_round_trip() {
    let mut rng = rng(33);
    let mut truth = random_params(&mut rng, 6, 0, 1, &[0, 0], 1.0);
    truth.beta = nalgebra::DMatrix::zeros(6, 0);
    let dir = tempfile::tempdir().unwrap();
    write_params(dir.path(), &truth).unwrap();
    let back = read_params(dir.path()).unwrap();
    assert_eq!(back.beta.shape(), (6, 0));
    assert_eq!(back.lambdas[1].shape(), (6, 0));
    assert_eq!(back, truth);
}

fn write_csv(path: &std::path::Path, cols: usize, rows: usize) {
    let header: Vec<String> = (1..=cols).map(|i| format!("V{i}")).collect();
    let mut text = header.join(",") + "\n";
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| format!("{}", (r * cols + c) as f64 * 0.1)).collect();
        text += &(row.join(",") + "\n");
    }
    fs::write(path, text).unwrap();
}

#[test]
fn manifest_loads_two_studies() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("a.csv"), 20, 12);
    write_csv(&dir.path().join("b.csv"), 20, 15);
    fs::write(
        dir.path().join("m.toml"),
        "[[study]]\nid = \"a\"\ndata = \"a.csv\"\n\n[[study]]\nid = \"b\"\ndata = \"b.csv\"\n",
    )
    .unwrap();
    let data = load_multistudy(&dir.path().join("m.toml")).unwrap();
    assert_eq!((data.p(), data.n_studies(), data.p_b()), (20, 2, 0));
    assert_eq!(data.studies[0].x[(1, 0)], 0.1);
}

#[test]
fn narrow_study_is_a_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("a.csv"), 20, 12);
    write_csv(&dir.path().join("b.csv"), 19, 12);
    fs::write(
        dir.path().join("m.toml"),
        "[[study]]\nid = \"a\"\ndata = \"a.csv\"\n\n[[study]]\nid = \"b\"\ndata = \"b.csv\"\n",
    )
    .unwrap();
    match load_multistudy(&dir.path().join("m.toml")).unwrap_err() {
        MsfrError::ShapeMismatch(msg) => assert!(msg.contains('b'), "{msg}"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn partial_covariates_are_a_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("a.csv"), 4, 12);
    write_csv(&dir.path().join("a_b.csv"), 2, 12);
    write_csv(&dir.path().join("b.csv"), 4, 12);
    fs::write(
        dir.path().join("m.toml"),
        "[[study]]\nid = \"a\"\ndata = \"a.csv\"\ncovariates = \"a_b.csv\"\n\n[[study]]\nid = \"b\"\ndata = \"b.csv\"\n",
    )
    .unwrap();
    assert_eq!(load_multistudy(&dir.path().join("m.toml")).unwrap_err().category(), "ShapeMismatch");
}

#[test]
fn malformed_number_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "V1,V2\n1,2\n3,x\n").unwrap();
    fs::write(dir.path().join("m.toml"), "[[study]]\nid = \"a\"\ndata = \"a.csv\"\n").unwrap();
    match load_multistudy(&dir.path().join("m.toml")).unwrap_err() {
        MsfrError::ParseError { line, file, .. } => {
            assert_eq!(line, 3);
            assert!(file.ends_with("a.csv"));
        }
        e => panic!("unexpected {e}"),
    }
}

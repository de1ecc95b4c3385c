//! K-fold cross-validated prediction error.
//!
//! Each study is split into `k` near-equal folds. For every fold the model
//! is fitted on the remaining subjects with fixed latent dimensions, test
//! subjects are scored, and responses are reconstructed as
//! `x̂ = βb + Φf̂ + Λ_s l̂` (without `βb` for covariate-free methods).

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::ecm::{fit, ConvergenceConfig};
use crate::error::{MsfrError, Result};
use crate::init::initialize;
use crate::linalg::DenseMatrix;
use crate::model::{ModelDims, MultiStudyData, Params, StudyDataset};
use crate::rng::{stream_rng, STREAM_FOLDS};
use crate::scores::{study_scores, ScoreMethod};
use crate::sim::{csv_err, method_input, Method};

/// Minimum training subjects per study regardless of the model size.
pub const MIN_TRAIN_SUBJECTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CVSpec {
    pub k: usize,
    /// Score methods to evaluate; every fitted fold is scored with each.
    pub score_methods: Vec<ScoreMethod>,
    pub seed: u64,
}

impl Default for CVSpec {
    fn default() -> Self {
        CVSpec { k: 5, score_methods: vec![ScoreMethod::Bartlett, ScoreMethod::Thurstone], seed: 0 }
    }
}

/// Per-study subject indices of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Fold {
    pub fn train_data(&self, data: &MultiStudyData) -> Result<MultiStudyData> {
        subset(data, &self.train)
    }

    pub fn test_data(&self, data: &MultiStudyData) -> Result<MultiStudyData> {
        subset(data, &self.test)
    }
}

fn subset(data: &MultiStudyData, idx: &[Vec<usize>]) -> Result<MultiStudyData> {
    MultiStudyData::new(data.studies.iter().zip(idx).map(|(s, i)| s.select_subjects(i)).collect())
}

/// Splits every study into `k` folds of near-equal size after a seeded
/// shuffle. Study `s` uses its own generator so adding studies does not
/// change the folds of the others.
pub fn kfold_split(data: &MultiStudyData, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(MsfrError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut assignments = Vec::with_capacity(data.n_studies());
    for (s, study) in data.studies.iter().enumerate() {
        let n = study.n();
        if n < k || n - n.div_ceil(k) < MIN_TRAIN_SUBJECTS {
            return Err(MsfrError::TooFewSubjects(format!(
                "study {} has {n} subjects, too few for {k} folds",
                study.id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed.wrapping_add(s as u64), STREAM_FOLDS));
        assignments.push(order);
    }
    let folds = (0..k)
        .map(|f| {
            let mut train = Vec::with_capacity(assignments.len());
            let mut test = Vec::with_capacity(assignments.len());
            for order in &assignments {
                let n = order.len();
                let (lo, hi) = (f * n / k, (f + 1) * n / k);
                let mut te: Vec<usize> = order[lo..hi].to_vec();
                let mut tr: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
                te.sort_unstable();
                tr.sort_unstable();
                test.push(te);
                train.push(tr);
            }
            Fold { train, test }
        })
        .collect();
    Ok(folds)
}

/// Whether predictions include the covariate term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    WithCovariates,
    FactorsOnly,
}

/// Reconstructs the responses of `study` (the `s`-th study of the model).
/// With covariates the scores are computed from `x − βb`.
pub fn predict(
    params: &Params,
    mode: PredictMode,
    score_method: ScoreMethod,
    study: &StudyDataset,
    s: usize,
) -> Result<DenseMatrix> {
    if s >= params.n_studies() || study.p() != params.p() {
        return Err(MsfrError::ShapeMismatch(format!("study {} does not match the model", study.id)));
    }
    let with_b = mode == PredictMode::WithCovariates && params.p_b() > 0;
    if with_b && study.p_b() != params.p_b() {
        return Err(MsfrError::ShapeMismatch(format!(
            "study {} has {} covariates, model has {}",
            study.id,
            study.p_b(),
            params.p_b()
        )));
    }
    let regression = if with_b { &params.beta * &study.b } else { DMatrix::zeros(study.p(), study.n()) };
    let xtilde = &study.x - &regression;
    let (f, l) = study_scores(score_method, &xtilde, params, s)?;
    Ok(regression + &params.phi * f + &params.lambdas[s] * l)
}

/// Cross-validated error of one method under one score method.
#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub method: Method,
    pub score_method: ScoreMethod,
    /// Mean over folds of the squared error per response entry.
    pub mse_entry: f64,
    /// Mean over folds of the squared error per subject (summed over responses).
    pub mse_subject: f64,
    pub fold_mse_entry: Vec<f64>,
    /// Folds whose fit stopped at the iteration limit.
    pub n_not_converged: usize,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub k: usize,
    pub q: usize,
    pub q_s: usize,
    pub rows: Vec<CvRow>,
}

impl CvReport {
    pub fn mse(&self, method: Method, score_method: ScoreMethod) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.score_method == score_method).map(|r| r.mse_entry)
    }

    /// Methods in rows, score methods in columns, per-entry MSE.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut methods: Vec<Method> = Vec::new();
        let mut scores: Vec<ScoreMethod> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
            if !scores.contains(&r.score_method) {
                scores.push(r.score_method);
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string()];
        header.extend(scores.iter().map(|s| s.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for m in methods {
            let mut row = vec![m.to_string()];
            row.extend(
                scores.iter().map(|&s| self.mse(m, s).map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per method × score method with both normalizations.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "score", "mse_entry", "mse_subject", "not_converged"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.method.to_string(),
                r.score_method.to_string(),
                format!("{:.6}", r.mse_entry),
                format!("{:.6}", r.mse_subject),
                r.n_not_converged.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A fitted method ready for prediction on new subjects.
struct Trained {
    params: Params,
    mode: PredictMode,
    converged: bool,
}

fn train(method: Method, data: &MultiStudyData, q: usize, q_s: usize, config: &ConvergenceConfig) -> Result<Trained> {
    let (input, beta) = method_input(method, data)?;
    let qs = if method.has_specific() { q_s } else { 0 };
    let dims = ModelDims::uniform(&input, q, qs);
    let f = fit(&input, &dims, config, initialize(&input, &dims)?)?;
    let mut params = f.params;
    if let Some(b) = beta {
        params.beta = b;
    }
    let mode = if method.has_beta() { PredictMode::WithCovariates } else { PredictMode::FactorsOnly };
    Ok(Trained { params, mode, converged: f.converged })
}

/// Squared error summed over all entries and the entry count, for every
/// requested score method.
fn fold_errors(trained: &Trained, test: &MultiStudyData, scores: &[ScoreMethod]) -> Result<Vec<(f64, usize, usize)>> {
    scores
        .iter()
        .map(|&sm| {
            let mut sse = 0.0;
            let mut subjects = 0;
            for (s, study) in test.studies.iter().enumerate() {
                let xhat = predict(&trained.params, trained.mode, sm, study, s)?;
                sse += (&study.x - xhat).norm_squared();
                subjects += study.n();
            }
            Ok((sse, subjects * test.p(), subjects))
        })
        .collect()
}

/// Cross-validated MSE for each method and score method with latent
/// dimensions fixed at `(q, q_s)`. Folds run concurrently; results are
/// aggregated in fold order.
pub fn cv_mse(
    data: &MultiStudyData,
    q: usize,
    q_s: usize,
    config: &ConvergenceConfig,
    spec: &CVSpec,
    methods: &[Method],
) -> Result<CvReport> {
    config.check()?;
    if spec.score_methods.is_empty() || methods.is_empty() {
        return Err(MsfrError::InvalidArgument("at least one method and one score method are required".into()));
    }
    ModelDims::uniform(data, q, q_s).check_rank()?;
    let folds = kfold_split(data, spec.k, spec.seed)?;
    let min_train = (q + q_s + 1).max(MIN_TRAIN_SUBJECTS);
    for fold in &folds {
        for (s, tr) in fold.train.iter().enumerate() {
            if tr.len() < min_train {
                return Err(MsfrError::TooFewSubjects(format!(
                    "study {} keeps {} training subjects, needs {min_train}",
                    data.studies[s].id,
                    tr.len()
                )));
            }
        }
    }
    // (squared error, entries, subjects) per score method, and convergence
    type FoldOutcome = (Vec<(f64, usize, usize)>, bool);
    let jobs: Vec<(usize, Method)> = (0..folds.len()).flat_map(|f| methods.iter().map(move |&m| (f, m))).collect();
    let results: Vec<Result<FoldOutcome>> = jobs
        .par_iter()
        .map(|&(f, m)| {
            let fold = &folds[f];
            let trained = train(m, &fold.train_data(data)?, q, q_s, config)?;
            Ok((fold_errors(&trained, &fold.test_data(data)?, &spec.score_methods)?, trained.converged))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (mi, &method) in methods.iter().enumerate() {
        for (si, &score_method) in spec.score_methods.iter().enumerate() {
            let mut fold_entry = Vec::with_capacity(folds.len());
            let mut fold_subject = Vec::with_capacity(folds.len());
            let mut not_converged = 0;
            for f in 0..folds.len() {
                let (errors, converged) = &results[f * methods.len() + mi];
                let (sse, entries, subjects) = errors[si];
                fold_entry.push(sse / entries as f64);
                fold_subject.push(sse / subjects as f64);
                if !converged {
                    not_converged += 1;
                }
            }
            let k = folds.len() as f64;
            rows.push(CvRow {
                method,
                score_method,
                mse_entry: fold_entry.iter().sum::<f64>() / k,
                mse_subject: fold_subject.iter().sum::<f64>() / k,
                fold_mse_entry: fold_entry,
                n_not_converged: not_converged,
            });
        }
    }
    Ok(CvReport { k: spec.k, q, q_s, rows })
}

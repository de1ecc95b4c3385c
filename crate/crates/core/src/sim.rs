//! Synthetic scenarios and the four-method benchmark.
//!
//! Truth: a third of the entries of `Φ` are `±U(0.6, 1)`, a third of each
//! `Λ_s` are `U(−1, 1)`, `Ψ_s` has `U(0, 1)` entries floored at
//! [`PSI_FLOOR`], and `β` and the covariates are standard normal.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ecm::StudyStats;
use crate::ecm::{residualize, ConvergenceConfig};
use crate::error::{MsfrError, Result};
use crate::init::pooled_ols;
use crate::linalg::{cholesky_lower, column_rank_ratio, rv_coefficient, rv_coefficient_psd, DenseMatrix, DiagMatrix};
use crate::model::{ModelDims, MultiStudyData, Params, StudyDataset, PSI_FLOOR};
use crate::rng::{stream_rng, STREAM_DATA, STREAM_TRUTH};
use crate::select::{select, Criterion, GridSpec, SelectionReport};

/// Attempts at drawing loadings with full column rank.
pub const MAX_TRUTH_ATTEMPTS: usize = 100;

const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub q: usize,
    pub q_s: usize,
    pub n_studies: usize,
    pub p_b: usize,
    pub p: usize,
    pub n_s: Vec<usize>,
    pub n_reps: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// One of the three reference scenarios at full size with 20 replications.
    pub fn scenario(id: u8) -> Result<Self> {
        let large = vec![1257, 1444, 2126, 4940, 2314, 897];
        let (q, q_s, n_studies, p_b, p, n_s) = match id {
            1 => (3, 1, 2, 2, 20, vec![500, 500]),
            2 => (4, 1, 6, 7, 42, large),
            3 => (4, 1, 6, 9, 42, large),
            _ => return Err(MsfrError::InvalidArgument(format!("unknown scenario {id}; expected 1, 2 or 3"))),
        };
        Ok(ScenarioSpec { name: format!("scenario{id}"), q, q_s, n_studies, p_b, p, n_s, n_reps: 20, seed: 0 })
    }

    /// Multiplies every study size by `factor`, rounding to the nearest
    /// integer.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.n_s = self.n_s.iter().map(|&n| ((n as f64 * factor).round() as usize).max(1)).collect();
        self
    }

    pub fn with_reps(mut self, n_reps: usize) -> Self {
        self.n_reps = n_reps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { p: self.p, p_b: self.p_b, q: self.q, q_s: vec![self.q_s; self.n_studies], n_s: self.n_s.clone() }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_s.len() != self.n_studies || self.n_studies == 0 {
            return Err(MsfrError::InvalidArgument(format!(
                "{} study sizes for {} studies",
                self.n_s.len(),
                self.n_studies
            )));
        }
        if self.n_reps == 0 {
            return Err(MsfrError::InvalidArgument("n_reps must be at least 1".into()));
        }
        if let Some(&n) = self.n_s.iter().find(|&&n| n < self.p_b + 1) {
            return Err(MsfrError::TooFewSubjects(format!("study size {n} with {} covariates", self.p_b)));
        }
        self.dims().check_rank()
    }

    /// `q ∈ 1..=q+2`, `q_s ∈ 1..=q_s+2`, trimmed to points that satisfy the
    /// rank constraint.
    pub fn default_grid(&self, criterion: Criterion) -> GridSpec {
        let fits = |q: usize, qs: usize| q + self.n_studies * qs <= self.p && q + qs < self.p;
        let q_values: Vec<usize> = (1..=self.q + 2).filter(|&q| fits(q, 1)).collect();
        let qs_values: Vec<usize> = (1..=self.q_s + 2).filter(|&qs| q_values.iter().all(|&q| fits(q, qs))).collect();
        GridSpec { q_values, qs_values, criterion }
    }
}

fn sparse_loadings<R: Rng>(rng: &mut R, p: usize, k: usize, mut draw: impl FnMut(&mut R) -> f64) -> DenseMatrix {
    let mut m = DMatrix::zeros(p, k);
    let count = p * k / 3;
    if count == 0 {
        return m;
    }
    let positions = sample(rng, p * k, count).into_vec();
    for pos in positions {
        m[pos] = draw(rng);
    }
    m
}

/// Draws ground-truth parameters for `spec` from `seed`.
pub fn generate_truth(spec: &ScenarioSpec, seed: u64) -> Result<Params> {
    spec.check()?;
    let mut rng = stream_rng(seed, STREAM_TRUTH);
    let p = spec.p;
    for _ in 0..MAX_TRUTH_ATTEMPTS {
        let phi = sparse_loadings(&mut rng, p, spec.q, |r| {
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            sign * r.random_range(0.6..1.0)
        });
        let lambdas: Vec<DenseMatrix> = (0..spec.n_studies)
            .map(|_| sparse_loadings(&mut rng, p, spec.q_s, |r| r.random_range(-1.0..1.0)))
            .collect();
        let psis = (0..spec.n_studies)
            .map(|_| DiagMatrix::from_vec((0..p).map(|_| rng.random::<f64>().max(PSI_FLOOR)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let beta = DMatrix::from_fn(p, spec.p_b, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut blocks = vec![phi.clone()];
        blocks.extend(lambdas.iter().cloned());
        let total = spec.q + spec.n_studies * spec.q_s;
        let mut stacked = DMatrix::zeros(p, total);
        let mut c = 0;
        for b in &blocks {
            stacked.columns_mut(c, b.ncols()).copy_from(b);
            c += b.ncols();
        }
        if total == 0 || column_rank_ratio(&stacked) > RANK_TOLERANCE {
            return Ok(Params { beta, phi, lambdas, psis });
        }
    }
    Err(MsfrError::DegenerateInput(format!("no full-rank loadings after {MAX_TRUTH_ATTEMPTS} attempts")))
}

/// Draws `b_is ~ N(0, I)` and `x_is ~ N(βb_is, Σ_s)` for every study.
pub fn generate_data(truth: &Params, spec: &ScenarioSpec, seed: u64) -> Result<MultiStudyData> {
    spec.check()?;
    if truth.n_studies() != spec.n_studies || truth.p() != spec.p || truth.p_b() != spec.p_b {
        return Err(MsfrError::ShapeMismatch("truth does not match the scenario".into()));
    }
    let mut rng = stream_rng(seed, STREAM_DATA);
    let mut studies = Vec::with_capacity(spec.n_studies);
    for (s, &n) in spec.n_s.iter().enumerate() {
        let chol = cholesky_lower(&truth.sigma(s))?;
        let b = DMatrix::from_fn(spec.p_b, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_fn(spec.p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &truth.beta * &b + chol * z;
        studies.push(StudyDataset::new(format!("study{}", s + 1), x, b)?);
    }
    MultiStudyData::new(studies)
}

/// Competing estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Full model.
    Msfr,
    /// Covariates ignored.
    Msfa,
    /// No study-specific factors.
    Fr,
    /// Pooled least squares for `β`, then covariate-free fit on residuals.
    MsfaLr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Msfr, Method::Msfa, Method::Fr, Method::MsfaLr];

    pub fn has_beta(self) -> bool {
        !matches!(self, Method::Msfa)
    }

    pub fn has_specific(self) -> bool {
        !matches!(self, Method::Fr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Msfr => "MSFR",
            Method::Msfa => "MSFA",
            Method::Fr => "FR",
            Method::MsfaLr => "MSFA&LR",
        })
    }
}

impl FromStr for Method {
    type Err = MsfrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msfr" => Ok(Method::Msfr),
            "msfa" => Ok(Method::Msfa),
            "fr" => Ok(Method::Fr),
            "msfa-lr" | "msfa&lr" | "msfa_lr" => Ok(Method::MsfaLr),
            other => Err(MsfrError::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Selection outcome for one method. `beta_two_step` holds the least-squares
/// `β` for [`Method::MsfaLr`].
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub method: Method,
    pub report: SelectionReport,
    pub beta_two_step: Option<DenseMatrix>,
}

impl MethodFit {
    /// Estimated parameters of the model selected under `criterion`, with
    /// `β` taken from the stage that estimates it. Returns the selected
    /// `(q, q_s)` as well.
    pub fn estimate(&self, criterion: Criterion) -> Option<(Params, (usize, usize))> {
        let i = self.report.argmin(criterion)?;
        let fit = self.report.fits[i].as_ref()?;
        let mut params = fit.params.clone();
        if let Some(b) = &self.beta_two_step {
            params.beta = b.clone();
        }
        let row = &self.report.rows[i];
        Some((params, (row.q, row.q_s)))
    }
}

/// Data `method` is fitted on, with the least-squares `β` for
/// [`Method::MsfaLr`]. [`Method::Fr`] uses the data as is; its `q_s = 0` is
/// set by the caller.
pub fn method_input(method: Method, data: &MultiStudyData) -> Result<(MultiStudyData, Option<DenseMatrix>)> {
    match method {
        Method::Msfr | Method::Fr => Ok((data.clone(), None)),
        Method::Msfa => Ok((data.without_covariates(), None)),
        Method::MsfaLr => {
            let beta = pooled_ols(&StudyStats::from_data(data))?;
            let residual = residualize(data, &beta)?;
            let studies = data
                .studies
                .iter()
                .zip(residual)
                .map(|(st, x)| StudyDataset::without_covariates(st.id.clone(), x))
                .collect();
            Ok((MultiStudyData::new(studies)?, Some(beta)))
        }
    }
}

/// Fits `method` over `grid`. [`Method::Fr`] replaces the `q_s` grid by `{0}`.
pub fn fit_method(
    method: Method,
    data: &MultiStudyData,
    grid: &GridSpec,
    config: &ConvergenceConfig,
) -> Result<MethodFit> {
    let (input, beta_two_step) = method_input(method, data)?;
    let report = if method.has_specific() {
        select(&input, grid, config)?
    } else {
        let fr_grid = GridSpec { q_values: grid.q_values.clone(), qs_values: vec![0], criterion: grid.criterion };
        select(&input, &fr_grid, config)?
    };
    Ok(MethodFit { method, report, beta_two_step })
}

/// RV coefficients of one estimate against the truth. Entries that do not
/// apply to the method are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RvScores {
    pub beta: Option<f64>,
    pub phi: f64,
    pub lambdas: Vec<Option<f64>>,
    pub sigmas: Vec<f64>,
}

/// RV of `estimate` against `truth`.
pub fn rv_scores(estimate: &Params, truth: &Params) -> Result<RvScores> {
    let beta =
        if estimate.p_b() > 0 && truth.p_b() > 0 { Some(rv_coefficient(&estimate.beta, &truth.beta)?) } else { None };
    let lambdas = estimate
        .lambdas
        .iter()
        .zip(&truth.lambdas)
        .map(|(e, t)| if e.ncols() > 0 && t.ncols() > 0 { rv_coefficient(e, t).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    let sigmas = (0..truth.n_studies())
        .map(|s| rv_coefficient_psd(&estimate.sigma(s), &truth.sigma(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RvScores { beta, phi: rv_coefficient(&estimate.phi, &truth.phi)?, lambdas, sigmas })
}

/// One replication × method × criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub method: Method,
    pub criterion: Criterion,
    pub q_hat: usize,
    pub qs_hat: usize,
    pub rv: RvScores,
}

/// Means over successful replications for one method × criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub criterion: Criterion,
    pub n_ok: usize,
    pub mean_q: f64,
    pub mean_qs: f64,
    /// Most frequent `(q̂, q̂_s)` and the share of replications selecting it.
    pub modal_dims: (usize, usize),
    pub modal_share: f64,
    pub rv_beta: Option<f64>,
    pub rv_phi: f64,
    pub rv_lambdas: Vec<Option<f64>>,
    pub rv_sigmas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub spec: ScenarioSpec,
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<MethodSummary>,
    /// `(replication, method, message)` for every excluded fit.
    pub failures: Vec<(usize, Method, String)>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn mean_opt(values: Vec<Option<f64>>) -> Option<f64> {
    if values.iter().any(Option::is_none) || values.is_empty() {
        None
    } else {
        Some(mean(values.into_iter().flatten()))
    }
}

fn summarize(method: Method, criterion: Criterion, recs: &[&ReplicationRecord], n_studies: usize) -> MethodSummary {
    let mut counts: Vec<((usize, usize), usize)> = Vec::new();
    for r in recs {
        let key = (r.q_hat, r.qs_hat);
        match counts.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += 1,
            None => counts.push((key, 1)),
        }
    }
    counts.sort();
    let (modal_dims, modal_count) =
        counts.iter().fold(((0, 0), 0), |best, &(k, c)| if c > best.1 { (k, c) } else { best });
    MethodSummary {
        method,
        criterion,
        n_ok: recs.len(),
        mean_q: mean(recs.iter().map(|r| r.q_hat as f64)),
        mean_qs: mean(recs.iter().map(|r| r.qs_hat as f64)),
        modal_dims,
        modal_share: if recs.is_empty() { 0.0 } else { modal_count as f64 / recs.len() as f64 },
        rv_beta: mean_opt(recs.iter().map(|r| r.rv.beta).collect()),
        rv_phi: mean(recs.iter().map(|r| r.rv.phi)),
        rv_lambdas: (0..n_studies).map(|s| mean_opt(recs.iter().map(|r| r.rv.lambdas[s]).collect())).collect(),
        rv_sigmas: (0..n_studies).map(|s| mean(recs.iter().map(|r| r.rv.sigmas[s]))).collect(),
    }
}

type RepOutcome = (Vec<ReplicationRecord>, Vec<(usize, Method, String)>);

fn run_replication(
    spec: &ScenarioSpec,
    rep: usize,
    methods: &[Method],
    grid: &GridSpec,
    config: &ConvergenceConfig,
) -> RepOutcome {
    let seed = spec.seed.wrapping_add(rep as u64);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let data = generate_truth(spec, seed).and_then(|t| generate_data(&t, spec, seed).map(|d| (t, d)));
    let (truth, data) = match data {
        Ok(v) => v,
        Err(e) => {
            for &m in methods {
                failures.push((rep, m, e.to_string()));
            }
            return (records, failures);
        }
    };
    for &method in methods {
        let outcome = fit_method(method, &data, grid, config).and_then(|fit| {
            let mut recs = Vec::new();
            for criterion in [Criterion::Aic, Criterion::Bic] {
                let (est, (q_hat, qs_hat)) =
                    fit.estimate(criterion).ok_or(MsfrError::AllFitsFailed(fit.report.rows.len()))?;
                recs.push(ReplicationRecord { rep, method, criterion, q_hat, qs_hat, rv: rv_scores(&est, &truth)? });
            }
            Ok(recs)
        });
        match outcome {
            Ok(r) => records.extend(r),
            Err(e) => failures.push((rep, method, e.to_string())),
        }
    }
    (records, failures)
}

/// Runs `spec.n_reps` replications; replication `r` uses seed `spec.seed + r`.
/// Each method is fitted once per replication and evaluated under both
/// criteria.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    methods: &[Method],
    grid: &GridSpec,
    config: &ConvergenceConfig,
) -> Result<BenchmarkReport> {
    spec.check()?;
    grid.check(spec.p, spec.n_studies)?;
    config.check()?;
    let outcomes: Vec<RepOutcome> =
        (0..spec.n_reps).into_par_iter().map(|rep| run_replication(spec, rep, methods, grid, config)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outcomes {
        records.extend(r);
        failures.extend(f);
    }
    let mut summaries = Vec::new();
    for &method in methods {
        for criterion in [Criterion::Aic, Criterion::Bic] {
            let recs: Vec<&ReplicationRecord> =
                records.iter().filter(|r| r.method == method && r.criterion == criterion).collect();
            summaries.push(summarize(method, criterion, &recs, spec.n_studies));
        }
    }
    Ok(BenchmarkReport { spec: spec.clone(), records, summaries, failures })
}

fn fmt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

impl BenchmarkReport {
    pub fn summary(&self, method: Method, criterion: Criterion) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method && s.criterion == criterion)
    }

    /// One row per replication × method × criterion.
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let s = self.spec.n_studies;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "rep".to_string(),
            "method".into(),
            "criterion".into(),
            "q_hat".into(),
            "qs_hat".into(),
            "rv_beta".into(),
            "rv_phi".into(),
        ];
        header.extend((1..=s).map(|i| format!("rv_lambda_{i}")));
        header.extend((1..=s).map(|i| format!("rv_sigma_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.rep.to_string(),
                r.method.to_string(),
                r.criterion.to_string(),
                r.q_hat.to_string(),
                r.qs_hat.to_string(),
                fmt6(r.rv.beta),
                fmt6(Some(r.rv.phi)),
            ];
            row.extend(r.rv.lambdas.iter().map(|v| fmt6(*v)));
            row.extend(r.rv.sigmas.iter().map(|v| fmt6(Some(*v))));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Averages per method × criterion.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let s = self.spec.n_studies;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "method".to_string(),
            "criterion".into(),
            "n_ok".into(),
            "q_hat".into(),
            "qs_hat".into(),
            "rv_beta".into(),
            "rv_phi".into(),
        ];
        header.extend((1..=s).map(|i| format!("rv_lambda_{i}")));
        header.extend((1..=s).map(|i| format!("rv_sigma_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for m in &self.summaries {
            let mut row = vec![
                m.method.to_string(),
                m.criterion.to_string(),
                m.n_ok.to_string(),
                format!("{:.2}", m.mean_q),
                format!("{:.2}", m.mean_qs),
                fmt6(m.rv_beta),
                fmt6(Some(m.rv_phi)),
            ];
            row.extend(m.rv_lambdas.iter().map(|v| fmt6(*v)));
            row.extend(m.rv_sigmas.iter().map(|v| fmt6(Some(*v))));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format `rep, method, criterion, field, value` for plotting.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rep", "method", "criterion", "field", "value"]).map_err(csv_err)?;
        for r in &self.records {
            let mut fields: Vec<(String, Option<f64>)> =
                vec![("beta".into(), r.rv.beta), ("phi".into(), Some(r.rv.phi))];
            fields.extend(r.rv.lambdas.iter().enumerate().map(|(i, v)| (format!("lambda_{}", i + 1), *v)));
            fields.extend(r.rv.sigmas.iter().enumerate().map(|(i, v)| (format!("sigma_{}", i + 1), Some(*v))));
            for (name, v) in fields.into_iter().filter(|(_, v)| v.is_some()) {
                w.write_record([r.rep.to_string(), r.method.to_string(), r.criterion.to_string(), name, fmt6(v)])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> MsfrError {
    MsfrError::Io(e.to_string())
}

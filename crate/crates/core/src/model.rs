//! Multi-study data containers, model dimensions and parameter sets.

use nalgebra::DMatrix;

use crate::error::{MsfrError, Result};
use crate::linalg::{cholesky_lower, DenseMatrix, DiagMatrix};

/// Lower bound applied to every idiosyncratic variance.
pub const PSI_FLOOR: f64 = 1e-4;

/// One study: responses `x` (`p x n_s`, subjects in columns) and known
/// covariates `b` (`p_b x n_s`, possibly zero rows).
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    pub id: String,
    pub x: DenseMatrix,
    pub b: DenseMatrix,
}

impl StudyDataset {
    pub fn new(id: impl Into<String>, x: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        let id = id.into();
        if x.ncols() != b.ncols() {
            return Err(MsfrError::ShapeMismatch(format!(
                "study {id}: {} response columns but {} covariate columns",
                x.ncols(),
                b.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(MsfrError::ShapeMismatch(format!("study {id}: p must be at least 1")));
        }
        Ok(StudyDataset { id, x, b })
    }

    /// Study without covariates.
    pub fn without_covariates(id: impl Into<String>, x: DenseMatrix) -> Self {
        let n = x.ncols();
        StudyDataset { id: id.into(), x, b: DMatrix::zeros(0, n) }
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn p_b(&self) -> usize {
        self.b.nrows()
    }

    /// Subset of subjects (columns), in the given order.
    pub fn select_subjects(&self, idx: &[usize]) -> StudyDataset {
        StudyDataset { id: self.id.clone(), x: self.x.select_columns(idx), b: self.b.select_columns(idx) }
    }
}

/// Ordered collection of studies observing the same `p` responses and `p_b`
/// covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStudyData {
    pub studies: Vec<StudyDataset>,
}

impl MultiStudyData {
    pub fn new(studies: Vec<StudyDataset>) -> Result<Self> {
        let first = studies.first().ok_or_else(|| MsfrError::ShapeMismatch("at least one study is required".into()))?;
        let (p, p_b) = (first.p(), first.p_b());
        for s in &studies {
            if s.p() != p {
                return Err(MsfrError::ShapeMismatch(format!("study {} has {} responses, expected {p}", s.id, s.p())));
            }
            if s.p_b() != p_b {
                return Err(MsfrError::ShapeMismatch(format!(
                    "study {} has {} covariates, expected {p_b}",
                    s.id,
                    s.p_b()
                )));
            }
        }
        let data = MultiStudyData { studies };
        let n = data.n_total();
        if p_b > 0 && n < p_b + 1 {
            return Err(MsfrError::ShapeMismatch(format!("{n} subjects cannot identify {p_b} covariate effects")));
        }
        Ok(data)
    }

    pub fn p(&self) -> usize {
        self.studies[0].p()
    }

    pub fn p_b(&self) -> usize {
        self.studies[0].p_b()
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn n_s(&self) -> Vec<usize> {
        self.studies.iter().map(|s| s.n()).collect()
    }

    pub fn n_total(&self) -> usize {
        self.studies.iter().map(|s| s.n()).sum()
    }

    /// Same responses with the covariates dropped.
    pub fn without_covariates(&self) -> MultiStudyData {
        MultiStudyData {
            studies: self.studies.iter().map(|s| StudyDataset::without_covariates(s.id.clone(), s.x.clone())).collect(),
        }
    }
}

/// Dimension bundle: responses `p`, covariates `p_b`, common factors `q`,
/// study-specific factors `q_s` and sample sizes `n_s`. The number of
/// studies is `q_s.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub p: usize,
    pub p_b: usize,
    pub q: usize,
    pub q_s: Vec<usize>,
    pub n_s: Vec<usize>,
}

impl ModelDims {
    pub fn for_data(data: &MultiStudyData, q: usize, q_s: Vec<usize>) -> Self {
        ModelDims { p: data.p(), p_b: data.p_b(), q, q_s, n_s: data.n_s() }
    }

    /// Same `q_s` for every study.
    pub fn uniform(data: &MultiStudyData, q: usize, q_s: usize) -> Self {
        Self::for_data(data, q, vec![q_s; data.n_studies()])
    }

    pub fn n_studies(&self) -> usize {
        self.q_s.len()
    }

    pub fn total_factors(&self) -> usize {
        self.q + self.q_s.iter().sum::<usize>()
    }

    /// Checks the full-column-rank constraints `q + Σq_s ≤ p` and `q + q_s < p`.
    pub fn check_rank(&self) -> Result<()> {
        let total = self.total_factors();
        if total > self.p {
            return Err(MsfrError::RankConstraintViolated { total, p: self.p, detail: String::new() });
        }
        for (s, &qs) in self.q_s.iter().enumerate() {
            if self.q + qs >= self.p {
                return Err(MsfrError::RankConstraintViolated {
                    total,
                    p: self.p,
                    detail: format!(" (study {s}: q + q_s = {} must be below p)", self.q + qs),
                });
            }
        }
        Ok(())
    }
}

/// Model parameters: covariate effects `beta` (`p x p_b`), common loadings
/// `phi` (`p x q`), per-study loadings `lambdas` (`p x q_s`) and per-study
/// idiosyncratic variances `psis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub beta: DenseMatrix,
    pub phi: DenseMatrix,
    pub lambdas: Vec<DenseMatrix>,
    pub psis: Vec<DiagMatrix>,
}

impl Params {
    pub fn n_studies(&self) -> usize {
        self.lambdas.len()
    }

    pub fn p(&self) -> usize {
        self.phi.nrows()
    }

    pub fn q(&self) -> usize {
        self.phi.ncols()
    }

    pub fn q_s(&self) -> Vec<usize> {
        self.lambdas.iter().map(|l| l.ncols()).collect()
    }

    pub fn p_b(&self) -> usize {
        self.beta.ncols()
    }

    /// Checks that every block matches `dims` and that all variances respect
    /// the floor.
    pub fn check_shapes(&self, dims: &ModelDims) -> Result<()> {
        let s = dims.n_studies();
        let bad = |what: &str| Err(MsfrError::ShapeMismatch(what.to_string()));
        if self.beta.shape() != (dims.p, dims.p_b) {
            return bad(&format!("beta is {:?}, expected ({}, {})", self.beta.shape(), dims.p, dims.p_b));
        }
        if self.phi.shape() != (dims.p, dims.q) {
            return bad(&format!("phi is {:?}, expected ({}, {})", self.phi.shape(), dims.p, dims.q));
        }
        if self.lambdas.len() != s || self.psis.len() != s {
            return bad(&format!(
                "{} loading blocks and {} variance blocks for {s} studies",
                self.lambdas.len(),
                self.psis.len()
            ));
        }
        for (i, (l, psi)) in self.lambdas.iter().zip(&self.psis).enumerate() {
            if l.shape() != (dims.p, dims.q_s[i]) {
                return bad(&format!("lambda[{i}] is {:?}, expected ({}, {})", l.shape(), dims.p, dims.q_s[i]));
            }
            if psi.dim() != dims.p {
                return bad(&format!("psi[{i}] has dimension {}, expected {}", psi.dim(), dims.p));
            }
        }
        Ok(())
    }

    /// `Σ_s = ΦΦᵀ + Λ_sΛ_sᵀ + Ψ_s` for one study.
    pub fn sigma(&self, s: usize) -> DenseMatrix {
        let mut sigma = &self.phi * self.phi.transpose();
        sigma += &self.lambdas[s] * self.lambdas[s].transpose();
        for (j, v) in self.psis[s].diagonal().iter().enumerate() {
            sigma[(j, j)] += v;
        }
        sigma
    }

    /// Stacked `[Φ | Λ_s]` loadings for one study.
    pub fn stacked_loadings(&self, s: usize) -> DenseMatrix {
        let (p, q) = self.phi.shape();
        let qs = self.lambdas[s].ncols();
        let mut l = DMatrix::zeros(p, q + qs);
        l.columns_mut(0, q).copy_from(&self.phi);
        l.columns_mut(q, qs).copy_from(&self.lambdas[s]);
        l
    }
}

/// Per-study marginal covariances.
#[derive(Debug, Clone)]
pub struct MarginalCov {
    pub sigma: Vec<DenseMatrix>,
}

/// Checks dimension constraints, shape agreement and finiteness of the data.
pub fn validate(data: &MultiStudyData, dims: &ModelDims) -> Result<()> {
    if dims.p != data.p() || dims.p_b != data.p_b() {
        return Err(MsfrError::ShapeMismatch(format!(
            "dims declare p = {}, p_b = {} but data has p = {}, p_b = {}",
            dims.p,
            dims.p_b,
            data.p(),
            data.p_b()
        )));
    }
    if dims.n_studies() != data.n_studies() || dims.n_s.len() != data.n_studies() {
        return Err(MsfrError::ShapeMismatch(format!(
            "dims describe {} studies but data has {}",
            dims.n_studies(),
            data.n_studies()
        )));
    }
    for (s, study) in data.studies.iter().enumerate() {
        if dims.n_s[s] != study.n() {
            return Err(MsfrError::ShapeMismatch(format!(
                "study {}: dims declare n_s = {} but data has {} subjects",
                study.id,
                dims.n_s[s],
                study.n()
            )));
        }
        if study.x.ncols() != study.b.ncols() {
            return Err(MsfrError::ShapeMismatch(format!(
                "study {}: response and covariate column counts differ",
                study.id
            )));
        }
    }
    dims.check_rank()?;
    for study in &data.studies {
        for m in [&study.x, &study.b] {
            for ((row, col), v) in m.iter().enumerate().map(|(k, v)| ((k % m.nrows(), k / m.nrows()), v)) {
                if !v.is_finite() {
                    return Err(MsfrError::NonFiniteData { study: study.id.clone(), row, col });
                }
            }
        }
    }
    Ok(())
}

/// Assembles `Σ_s = ΦΦᵀ + Λ_sΛ_sᵀ + Ψ_s` for every study.
pub fn marginal_covariance(params: &Params) -> MarginalCov {
    MarginalCov { sigma: (0..params.n_studies()).map(|s| params.sigma(s)).collect() }
}

impl MarginalCov {
    /// Cholesky check of every study covariance.
    pub fn is_positive_definite(&self) -> bool {
        self.sigma.iter().all(|s| cholesky_lower(s).is_ok())
    }
}

/// Share of total variance attributed to each factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedVariance {
    /// Per common factor: squared column norm over `tr(Σ_s)`, averaged over
    /// studies with weights `n_s / n`.
    pub common: Vec<f64>,
    /// Per study and specific factor, relative to that study's `tr(Σ_s)`.
    pub specific_local: Vec<Vec<f64>>,
    /// Per study and specific factor, relative to the `n_s`-weighted average
    /// of `tr(Σ_s)` across studies.
    pub specific_pooled: Vec<Vec<f64>>,
    /// Study weights `n_s / n`.
    pub weights: Vec<f64>,
}

impl ExplainedVariance {
    /// Weighted total share explained by all factors, at most one.
    pub fn total(&self) -> f64 {
        let specific: f64 =
            self.specific_local.iter().zip(&self.weights).map(|(shares, w)| w * shares.iter().sum::<f64>()).sum();
        self.common.iter().sum::<f64>() + specific
    }
}

pub fn explained_variance(params: &Params, n_s: &[usize]) -> ExplainedVariance {
    let n: usize = n_s.iter().sum();
    let weights: Vec<f64> = n_s.iter().map(|&k| k as f64 / n as f64).collect();
    let col_sq = |m: &DenseMatrix| -> Vec<f64> { m.column_iter().map(|c| c.norm_squared()).collect() };
    let phi_sq = col_sq(&params.phi);
    let traces: Vec<f64> = (0..params.n_studies())
        .map(|s| phi_sq.iter().sum::<f64>() + params.lambdas[s].norm_squared() + params.psis[s].diagonal().sum())
        .collect();
    let pooled_trace: f64 = traces.iter().zip(&weights).map(|(t, w)| t * w).sum();
    let common = phi_sq.iter().map(|v| traces.iter().zip(&weights).map(|(t, w)| w * v / t).sum()).collect();
    let specific_local =
        params.lambdas.iter().zip(&traces).map(|(l, t)| col_sq(l).into_iter().map(|v| v / t).collect()).collect();
    let specific_pooled =
        params.lambdas.iter().map(|l| col_sq(l).into_iter().map(|v| v / pooled_trace).collect()).collect();
    ExplainedVariance { common, specific_local, specific_pooled, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn two_study_data(p: usize, n: usize) -> MultiStudyData {
        let studies = (0..2)
            .map(|s| {
                let x = DMatrix::from_fn(p, n, |i, j| ((i * 7 + j * 3 + s) % 11) as f64 - 5.0);
                let b = DMatrix::from_fn(2, n, |i, j| ((i + 2 * j + s) % 5) as f64);
                StudyDataset::new(format!("s{s}"), x, b).unwrap()
            })
            .collect();
        MultiStudyData::new(studies).unwrap()
    }

    #[test]
    fn scenario_one_dims_validate() {
        let data = two_study_data(20, 10);
        let dims = ModelDims::uniform(&data, 3, 1);
        assert!(validate(&data, &dims).is_ok());
    }

    #[test]
    fn rank_boundary_rejected() {
        let data = two_study_data(6, 10);
        let dims = ModelDims::for_data(&data, 3, vec![2, 2]);
        assert!(matches!(validate(&data, &dims), Err(MsfrError::RankConstraintViolated { total: 7, p: 6, .. })));
        let dims = ModelDims::for_data(&data, 3, vec![3, 0]);
        assert!(matches!(validate(&data, &dims), Err(MsfrError::RankConstraintViolated { .. })));
    }

    #[test]
    fn nan_is_located() {
        let mut data = two_study_data(4, 5);
        data.studies[1].x[(2, 3)] = f64::NAN;
        let dims = ModelDims::uniform(&data, 1, 1);
        assert_eq!(validate(&data, &dims), Err(MsfrError::NonFiniteData { study: "s1".into(), row: 2, col: 3 }));
    }

    #[test]
    fn mismatched_studies_rejected() {
        let a = StudyDataset::without_covariates("a", DMatrix::zeros(3, 4));
        let b = StudyDataset::without_covariates("b", DMatrix::zeros(2, 4));
        assert!(matches!(MultiStudyData::new(vec![a, b]), Err(MsfrError::ShapeMismatch(_))));
        assert!(StudyDataset::new("c", DMatrix::zeros(3, 4), DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn factor_free_covariance_is_psi() {
        let params = Params {
            beta: DMatrix::zeros(3, 0),
            phi: DMatrix::zeros(3, 0),
            lambdas: vec![DMatrix::zeros(3, 0)],
            psis: vec![DiagMatrix::from_vec(vec![1.0, 2.0, 3.0]).unwrap()],
        };
        let cov = marginal_covariance(&params);
        assert_eq!(cov.sigma[0], DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0, 3.0]));
        assert!(cov.is_positive_definite());
    }

    #[test]
    fn hand_summed_covariance() {
        let params = Params {
            beta: DMatrix::zeros(2, 0),
            phi: dmatrix![1.0; 0.0],
            lambdas: vec![dmatrix![0.0; 1.0]],
            psis: vec![DiagMatrix::identity(2)],
        };
        assert_eq!(marginal_covariance(&params).sigma[0], dmatrix![2.0, 0.0; 0.0, 2.0]);
    }

    #[test]
    fn explained_variance_limits() {
        let params = Params {
            beta: DMatrix::zeros(3, 0),
            phi: dmatrix![1.0; 1.0; 1.0],
            lambdas: vec![DMatrix::zeros(3, 0)],
            psis: vec![DiagMatrix::from_vec(vec![PSI_FLOOR; 3]).unwrap()],
        };
        let ev = explained_variance(&params, &[10]);
        assert!((ev.common[0] - 1.0).abs() < 1e-3);

        let params = Params {
            beta: DMatrix::zeros(2, 0),
            phi: dmatrix![1.0, 0.0; 0.0, 1.0],
            lambdas: vec![DMatrix::zeros(2, 0), DMatrix::zeros(2, 0)],
            psis: vec![DiagMatrix::from_vec(vec![PSI_FLOOR; 2]).unwrap(); 2],
        };
        let ev = explained_variance(&params, &[10, 30]);
        assert_relative_eq!(ev.common[0], ev.common[1], epsilon = 1e-15);
        assert!((ev.common[0] - 0.5).abs() < 1e-3);
    }
}

//! Two-step least-squares starting values.
//!
//! 1. `β⁰` is the pooled multivariate least-squares fit of the stacked
//!    responses on the stacked covariates.
//! 2. `Φ⁰` holds the leading `q` principal directions of the residual second
//!    moment, scaled by the square roots of their eigenvalues. Each `Λ⁰_s` and
//!    `Ψ⁰_s` come from a principal-axis factor analysis of study `s`
//!    residuals with the common principal subspace projected out.

use nalgebra::{DMatrix, DVector};

use crate::ecm::StudyStats;
use crate::error::Result;
use crate::linalg::{spd_solve, top_eigen, DenseMatrix, DiagMatrix};
use crate::model::{validate, ModelDims, MultiStudyData, Params, PSI_FLOOR};

/// Communality re-estimation rounds in the per-study factor analysis.
pub const PRINCIPAL_AXIS_ROUNDS: usize = 20;

/// Lower bound on starting variances, as a fraction of the response's
/// residual second moment.
const MIN_UNIQUENESS_SHARE: f64 = 0.05;

/// Pooled least squares `β = [Σ XBᵀ][Σ BBᵀ]⁻¹` over all studies.
pub fn pooled_ols(stats: &[StudyStats]) -> Result<DenseMatrix> {
    let p = stats[0].sxx.nrows();
    let p_b = stats[0].sbb.nrows();
    if p_b == 0 {
        return Ok(DMatrix::zeros(p, 0));
    }
    let mut sxb = DMatrix::zeros(p, p_b);
    let mut sbb = DMatrix::zeros(p_b, p_b);
    for st in stats {
        sxb += &st.sxb;
        sbb += &st.sbb;
    }
    Ok(spd_solve(&sbb, &sxb.transpose())?.transpose())
}

/// Principal-axis factor analysis of a symmetric matrix with `k` factors.
/// Returns `p x k` loadings.
pub fn principal_axis(target: &DenseMatrix, k: usize, rounds: usize) -> DenseMatrix {
    let p = target.nrows();
    if k == 0 {
        return DMatrix::zeros(p, 0);
    }
    let diag: DVector<f64> = target.diagonal();
    let mut communality = diag.map(|d| 0.5 * d.max(0.0));
    let mut loadings = DMatrix::zeros(p, k);
    for _ in 0..rounds.max(1) {
        let mut reduced = target.clone();
        for j in 0..p {
            reduced[(j, j)] = communality[j];
        }
        let (values, vectors) = top_eigen(&reduced, k);
        loadings = vectors;
        for (c, v) in values.iter().enumerate() {
            let scale = v.max(0.0).sqrt();
            loadings.column_mut(c).scale_mut(scale);
        }
        for j in 0..p {
            communality[j] = loadings.row(j).norm_squared().min(0.995 * diag[j].max(0.0));
        }
    }
    loadings
}

/// Two-step least-squares initialization.
pub fn initialize(data: &MultiStudyData, dims: &ModelDims) -> Result<Params> {
    validate(data, dims)?;
    initialize_from_stats(&StudyStats::from_data(data), dims)
}

pub(crate) fn initialize_from_stats(stats: &[StudyStats], dims: &ModelDims) -> Result<Params> {
    let p = dims.p;
    let beta = pooled_ols(stats)?;
    let moments: Vec<DenseMatrix> = stats.iter().map(|st| st.residual_second_moment(&beta)).collect();
    let n_total: usize = stats.iter().map(|s| s.n).sum();
    let mut pooled = DMatrix::zeros(p, p);
    for (st, c) in stats.iter().zip(&moments) {
        pooled += c * (st.n as f64 / n_total as f64);
    }

    let (values, directions) = top_eigen(&pooled, dims.q);
    let mut phi = directions.clone();
    for (c, v) in values.iter().enumerate() {
        phi.column_mut(c).scale_mut(v.max(0.0).sqrt());
    }
    let projector = DMatrix::identity(p, p) - &directions * directions.transpose();

    let mut lambdas = Vec::with_capacity(stats.len());
    let mut psis = Vec::with_capacity(stats.len());
    for (s, c) in moments.iter().enumerate() {
        let reduced = &projector * c * &projector;
        let lambda = principal_axis(&reduced, dims.q_s[s], PRINCIPAL_AXIS_ROUNDS);
        let psi = DVector::from_iterator(
            p,
            (0..p).map(|j| {
                let resid = c[(j, j)] - phi.row(j).norm_squared() - lambda.row(j).norm_squared();
                resid.max(MIN_UNIQUENESS_SHARE * c[(j, j)]).max(PSI_FLOOR)
            }),
        );
        lambdas.push(lambda);
        psis.push(DiagMatrix::new(psi)?);
    }
    Ok(Params { beta, phi, lambdas, psis })
}

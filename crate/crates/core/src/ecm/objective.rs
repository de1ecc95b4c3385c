//! Expected complete-data and observed-data log-likelihoods.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::moments::{EStepMoments, StudyMoments, StudyStats};
use crate::error::{MsfrError, Result};
use crate::linalg::{spd_log_det, woodbury_inverse, DenseMatrix, DiagMatrix};
use crate::model::{MultiStudyData, Params};

/// `diag` of `C + ΦE_ffΦᵀ + ΛE_llΛᵀ − 2E_xfΦᵀ − 2E_xlΛᵀ + 2ΦE_flΛᵀ`,
/// with `C`, `E_xf`, `E_xl` supplied separately so that a shifted `β` can be
/// evaluated against a fixed posterior.
fn residual_diag(
    c: &DenseMatrix,
    e_xf: &DenseMatrix,
    e_xl: &DenseMatrix,
    m: &StudyMoments,
    phi: &DenseMatrix,
    lambda: &DenseMatrix,
) -> Vec<f64> {
    let phi_eff = phi * &m.e_ff;
    let lam_ell = lambda * &m.e_ll;
    let phi_efl = phi * &m.e_fl;
    (0..c.nrows())
        .map(|j| {
            c[(j, j)] + phi_eff.row(j).dot(&phi.row(j)) + lam_ell.row(j).dot(&lambda.row(j))
                - 2.0 * e_xf.row(j).dot(&phi.row(j))
                - 2.0 * e_xl.row(j).dot(&lambda.row(j))
                + 2.0 * phi_efl.row(j).dot(&lambda.row(j))
        })
        .collect()
}

pub(crate) fn study_term(n: usize, psi: &DiagMatrix, diag: &[f64]) -> f64 {
    let tr: f64 = diag.iter().zip(psi.diagonal().iter()).map(|(d, v)| d / v).sum();
    -0.5 * n as f64 * (psi.log_det() + tr)
}

/// Expected complete-data log-likelihood
/// `Σ_s −n_s/2 (log|Ψ_s| + tr[Ψ_s⁻¹(E_x̃x̃ + ΦE_ffΦᵀ + Λ_sE_llΛ_sᵀ − 2E_x̃fΦᵀ − 2E_x̃lΛ_sᵀ + 2ΦE_flΛ_sᵀ)])`,
/// without the additive constant.
pub fn expected_complete_loglik(params: &Params, moments: &EStepMoments, n_s: &[usize]) -> f64 {
    moments
        .studies
        .iter()
        .enumerate()
        .map(|(s, m)| {
            let d = residual_diag(&m.c_xx, &m.e_xf, &m.e_xl, m, &params.phi, &params.lambdas[s]);
            study_term(n_s[s], &params.psis[s], &d)
        })
        .sum()
}

/// The expected complete-data log-likelihood as a function of all of
/// `θ = (Φ, Λ_s, Ψ_s, β)` with the factor posterior frozen at the E-step.
/// Posterior means are `δ(x − β_old b)`; the responses are residualized
/// with whatever `β` is evaluated.
pub struct PosteriorSurrogate<'a> {
    pub stats: &'a [StudyStats],
    pub moments: &'a EStepMoments,
    pub beta_old: DenseMatrix,
}

impl PosteriorSurrogate<'_> {
    pub fn value(&self, params: &Params) -> f64 {
        self.stats
            .iter()
            .zip(&self.moments.studies)
            .enumerate()
            .map(|(s, (st, m))| {
                let n = st.n as f64;
                let c = st.residual_cross(&params.beta, &params.beta) / n;
                let cross = st.residual_cross(&params.beta, &self.beta_old) / n;
                let e_xf = &cross * m.delta.transpose();
                let e_xl = &cross * m.delta_s.transpose();
                let d = residual_diag(&c, &e_xf, &e_xl, m, &params.phi, &params.lambdas[s]);
                study_term(st.n, &params.psis[s], &d)
            })
            .sum()
    }
}

/// `log N` summed over subjects for one study with residual second moment `c`.
/// `log|Σ_s|` comes from the determinant lemma with a Cholesky of the
/// `(q + q_s)`-dimensional core, `Σ_s⁻¹` from the Woodbury identity.
pub(crate) fn study_observed_loglik(c: &DenseMatrix, n: usize, params: &Params, s: usize) -> Result<f64> {
    let p = c.nrows();
    let psi = &params.psis[s];
    let l = params.stacked_loadings(s);
    let k = l.ncols();
    let inv_psi = psi.inverse_diagonal();
    let mut scaled = l.clone();
    for (j, mut row) in scaled.row_iter_mut().enumerate() {
        row *= inv_psi[j];
    }
    let core = DMatrix::identity(k, k) + l.transpose() * &scaled;
    let log_det = psi.log_det() + spd_log_det(&core)?;
    let sigma_inv = woodbury_inverse(psi, &l)?;
    let tr: f64 = sigma_inv.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
    Ok(-0.5 * n as f64 * (p as f64 * (2.0 * PI).ln() + log_det + tr))
}

pub(crate) fn observed_loglik_from_stats(stats: &[StudyStats], params: &Params) -> Result<f64> {
    let mut total = 0.0;
    for (s, st) in stats.iter().enumerate() {
        let c = st.residual_second_moment(&params.beta);
        total += study_observed_loglik(&c, st.n, params, s)?;
    }
    Ok(total)
}

/// Observed-data log-likelihood `Σ_s Σ_i log N(x_is; βb_is, Σ_s)`.
pub fn observed_loglik(data: &MultiStudyData, params: &Params) -> Result<f64> {
    if params.n_studies() != data.n_studies() || params.p() != data.p() || params.p_b() != data.p_b() {
        return Err(MsfrError::ShapeMismatch("parameters do not match the data".into()));
    }
    observed_loglik_from_stats(&StudyStats::from_data(data), params)
}

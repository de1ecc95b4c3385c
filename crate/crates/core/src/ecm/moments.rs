//! Sufficient statistics, residualization and E-step conditional moments.

use nalgebra::DMatrix;

use crate::error::{MsfrError, Result};
use crate::linalg::{cholesky_lower, spd_inverse, symmetrize, woodbury_inverse, DenseMatrix, DiagMatrix};
use crate::model::{MultiStudyData, Params};

/// Per-study cross-product sums `XXᵀ`, `XBᵀ`, `BBᵀ`. Every quantity the
/// fitter needs is a function of these, so an iteration costs nothing in `n_s`.
#[derive(Debug, Clone)]
pub struct StudyStats {
    pub n: usize,
    pub sxx: DenseMatrix,
    pub sxb: DenseMatrix,
    pub sbb: DenseMatrix,
}

impl StudyStats {
    pub fn from_data(data: &MultiStudyData) -> Vec<StudyStats> {
        data.studies
            .iter()
            .map(|s| StudyStats {
                n: s.n(),
                sxx: symmetrize(&(&s.x * s.x.transpose())),
                sxb: &s.x * s.b.transpose(),
                sbb: &s.b * s.b.transpose(),
            })
            .collect()
    }

    /// `(X − β_left B)(X − β_right B)ᵀ`.
    pub fn residual_cross(&self, beta_left: &DenseMatrix, beta_right: &DenseMatrix) -> DenseMatrix {
        if self.sbb.nrows() == 0 {
            return self.sxx.clone();
        }
        &self.sxx - &self.sxb * beta_right.transpose() - beta_left * self.sxb.transpose()
            + beta_left * &self.sbb * beta_right.transpose()
    }

    /// Second moment `C_x̃x̃ = X̃X̃ᵀ / n_s` of the residualized responses.
    pub fn residual_second_moment(&self, beta: &DenseMatrix) -> DenseMatrix {
        let inv_n = 1.0 / self.n as f64;
        let p = self.sxx.nrows();
        if self.sbb.nrows() == 0 {
            return &self.sxx * inv_n;
        }
        // XXᵀ − Tβᵀ − βTᵀ with T = XBᵀ − βBBᵀ/2, filled symmetrically
        let mut t = self.sxb.clone();
        t.gemm(-0.5, beta, &self.sbb, 1.0);
        let tb = t * beta.transpose();
        let mut c = DMatrix::zeros(p, p);
        for j in 0..p {
            for i in 0..=j {
                let v = (self.sxx[(i, j)] - tb[(i, j)] - tb[(j, i)]) * inv_n;
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }

    /// `X̃Bᵀ = XBᵀ − βBBᵀ`.
    pub fn residual_covariate_cross(&self, beta: &DenseMatrix) -> DenseMatrix {
        &self.sxb - beta * &self.sbb
    }
}

/// `x̃_is = x_is − β b_is` for every study.
pub fn residualize(data: &MultiStudyData, beta: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
    if beta.shape() != (data.p(), data.p_b()) {
        return Err(MsfrError::ShapeMismatch(format!(
            "beta is {:?}, data needs ({}, {})",
            beta.shape(),
            data.p(),
            data.p_b()
        )));
    }
    Ok(data.studies.iter().map(|s| if s.p_b() == 0 { s.x.clone() } else { &s.x - beta * &s.b }).collect())
}

/// Conditional moments of the latent factors of one study given `x̃`,
/// averaged over subjects.
#[derive(Debug, Clone)]
pub struct StudyMoments {
    /// `C_x̃x̃`, `p x p`.
    pub c_xx: DenseMatrix,
    /// `δ = ΦᵀΣ⁻¹`, `q x p`.
    pub delta: DenseMatrix,
    /// `δ_s = Λ_sᵀΣ⁻¹`, `q_s x p`.
    pub delta_s: DenseMatrix,
    /// `Var[f | x̃] = I − ΦᵀΣ⁻¹Φ`.
    pub var_f: DenseMatrix,
    /// `Var[l | x̃] = I − Λ_sᵀΣ⁻¹Λ_s`.
    pub var_l: DenseMatrix,
    /// `Cov[f, l | x̃] = −ΦᵀΣ⁻¹Λ_s`.
    pub cov_fl: DenseMatrix,
    pub e_ff: DenseMatrix,
    pub e_ll: DenseMatrix,
    pub e_xf: DenseMatrix,
    pub e_xl: DenseMatrix,
    pub e_fl: DenseMatrix,
    /// `log|Σ_s|`.
    pub log_det_sigma: f64,
    /// `tr(Σ_s⁻¹C_x̃x̃)`.
    pub trace_sigma_inv_c: f64,
}

impl StudyMoments {
    /// Observed-data log-likelihood of the study's `n` subjects.
    pub fn observed_loglik(&self, n: usize) -> f64 {
        let p = self.c_xx.nrows() as f64;
        -0.5 * n as f64 * (p * (2.0 * std::f64::consts::PI).ln() + self.log_det_sigma + self.trace_sigma_inv_c)
    }
}

#[derive(Debug, Clone)]
pub struct EStepMoments {
    pub studies: Vec<StudyMoments>,
}

/// Posterior projections `δ = (I + ΦᵀW_ΛΦ)⁻¹ΦᵀW_Λ` and
/// `δ_s = (I + ΛᵀW_ΦΛ)⁻¹ΛᵀW_Φ`, with `W_Λ = (ΛΛᵀ + Ψ)⁻¹` and
/// `W_Φ = (ΦΦᵀ + Ψ)⁻¹` both formed by the Woodbury identity.
/// Also returns the posterior variances `(I + ΦᵀW_ΛΦ)⁻¹` and `(I + ΛᵀW_ΦΛ)⁻¹`.
pub fn posterior_projections(
    phi: &DenseMatrix,
    lambda: &DenseMatrix,
    psi: &DiagMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let project = |a: &DenseMatrix, other: &DenseMatrix| -> Result<(DenseMatrix, DenseMatrix)> {
        let k = a.ncols();
        if k == 0 {
            return Ok((DMatrix::zeros(0, psi.dim()), DMatrix::zeros(0, 0)));
        }
        let w = woodbury_inverse(psi, other)?;
        let at_w = a.transpose() * w;
        let core = DMatrix::identity(k, k) + &at_w * a;
        let var = spd_inverse(&core)?;
        Ok((&var * at_w, var))
    };
    let (delta, var_f) = project(phi, lambda)?;
    let (delta_s, var_l) = project(lambda, phi)?;
    Ok((delta, delta_s, var_f, var_l))
}

/// E-step for one study given its residual second moment `c_xx`.
///
/// Uses the joint posterior of `(f, l)`: with `K = [Φ | Λ_s]` and
/// `M = I + KᵀΨ⁻¹K`, the posterior covariance is `M⁻¹` and the projection is
/// `M⁻¹KᵀΨ⁻¹ = KᵀΣ⁻¹`, whose row blocks are `δ` and `δ_s`. Only `k x k`
/// systems are factorized.
pub fn study_moments(
    c_xx: DenseMatrix,
    phi: &DenseMatrix,
    lambda: &DenseMatrix,
    psi: &DiagMatrix,
) -> Result<StudyMoments> {
    let p = c_xx.nrows();
    let q = phi.ncols();
    let qs = lambda.ncols();
    let k = q + qs;
    let mut loadings = DMatrix::zeros(p, k);
    loadings.columns_mut(0, q).copy_from(phi);
    loadings.columns_mut(q, qs).copy_from(lambda);
    let inv_psi = psi.inverse_diagonal();
    let mut scaled = loadings.clone();
    for (j, mut row) in scaled.row_iter_mut().enumerate() {
        row *= inv_psi[j];
    }
    let core = DMatrix::identity(k, k) + loadings.transpose() * &scaled;
    let chol = cholesky_lower(&core)?;
    let core_log_det: f64 = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let var = spd_inverse(&core)?;
    let proj = &var * scaled.transpose();
    let proj_c = &proj * &c_xx;

    let trace_psi_c: f64 = (0..p).map(|j| c_xx[(j, j)] * inv_psi[j]).sum();
    let correction: f64 = proj_c.iter().zip(scaled.transpose().iter()).map(|(a, b)| a * b).sum();

    let e_x = proj_c.transpose();
    let e_joint = symmetrize(&(&proj_c * proj.transpose() + &var));
    Ok(StudyMoments {
        delta: proj.rows(0, q).into_owned(),
        delta_s: proj.rows(q, qs).into_owned(),
        var_f: var.view((0, 0), (q, q)).into_owned(),
        var_l: var.view((q, q), (qs, qs)).into_owned(),
        cov_fl: var.view((0, q), (q, qs)).into_owned(),
        e_ff: e_joint.view((0, 0), (q, q)).into_owned(),
        e_ll: e_joint.view((q, q), (qs, qs)).into_owned(),
        e_fl: e_joint.view((0, q), (q, qs)).into_owned(),
        e_xf: e_x.columns(0, q).into_owned(),
        e_xl: e_x.columns(q, qs).into_owned(),
        log_det_sigma: psi.log_det() + core_log_det,
        trace_sigma_inv_c: trace_psi_c - correction,
        c_xx,
    })
}

/// E-step from residualized data `x̃_s` (`p x n_s` per study).
pub fn e_step(xtilde: &[DenseMatrix], params: &Params) -> Result<EStepMoments> {
    if xtilde.len() != params.n_studies() {
        return Err(MsfrError::ShapeMismatch(format!(
            "{} residual blocks for {} studies",
            xtilde.len(),
            params.n_studies()
        )));
    }
    let studies = xtilde
        .iter()
        .enumerate()
        .map(|(s, xt)| {
            let c = xt * xt.transpose() / xt.ncols() as f64;
            study_moments(symmetrize(&c), &params.phi, &params.lambdas[s], &params.psis[s])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EStepMoments { studies })
}

/// E-step from sufficient statistics at the current `β`.
pub fn e_step_from_stats(stats: &[StudyStats], params: &Params) -> Result<EStepMoments> {
    let studies = stats
        .iter()
        .enumerate()
        .map(|(s, st)| {
            study_moments(st.residual_second_moment(&params.beta), &params.phi, &params.lambdas[s], &params.psis[s])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EStepMoments { studies })
}

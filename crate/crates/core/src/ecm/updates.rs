//! Conditional maximization steps. Each update maximizes the expected
//! complete-data log-likelihood in one parameter block with the others held.

use nalgebra::{DMatrix, DVector};

use super::moments::{EStepMoments, StudyMoments, StudyStats};
use crate::error::{MsfrError, Result};
use crate::linalg::{kronecker, solve_kron_system, spd_solve, spd_solve_in_place, unvec, vec, DenseMatrix, DiagMatrix};
use crate::model::{MultiStudyData, PSI_FLOOR};

/// Idiosyncratic variances:
/// `diag{C + ΦE_ffΦᵀ + ΛE_llΛᵀ − 2E_xfΦᵀ − 2E_xlΛᵀ + 2ΦE_flΛᵀ}`, floored at
/// [`PSI_FLOOR`].
pub fn cm_psi(m: &StudyMoments, phi: &DenseMatrix, lambda: &DenseMatrix) -> DiagMatrix {
    floor_psi(psi_target(m, phi, lambda))
}

/// Unfloored `diag{C + ΦE_ffΦᵀ + ΛE_llΛᵀ − 2E_xfΦᵀ − 2E_xlΛᵀ + 2ΦE_flΛᵀ}`.
pub(crate) fn psi_target(m: &StudyMoments, phi: &DenseMatrix, lambda: &DenseMatrix) -> DVector<f64> {
    let p = m.c_xx.nrows();
    let phi_eff = phi * &m.e_ff;
    let lam_ell = lambda * &m.e_ll;
    let phi_efl = phi * &m.e_fl;
    DVector::from_iterator(
        p,
        (0..p).map(|j| {
            m.c_xx[(j, j)] + phi_eff.row(j).dot(&phi.row(j)) + lam_ell.row(j).dot(&lambda.row(j))
                - 2.0 * m.e_xf.row(j).dot(&phi.row(j))
                - 2.0 * m.e_xl.row(j).dot(&lambda.row(j))
                + 2.0 * phi_efl.row(j).dot(&lambda.row(j))
        }),
    )
}

pub(crate) fn floor_psi(mut diag: DVector<f64>) -> DiagMatrix {
    for v in diag.iter_mut() {
        *v = if v.is_finite() { v.max(PSI_FLOOR) } else { PSI_FLOOR };
    }
    DiagMatrix::new(diag).expect("floored variances are positive")
}

/// Right-hand side `Σ_s n_sΨ_s⁻¹(E_xf − Λ_sE_flᵀ)` of the common-loading equation.
fn phi_rhs(moments: &EStepMoments, lambdas: &[DenseMatrix], psis: &[DiagMatrix], n_s: &[usize]) -> DenseMatrix {
    let m0 = &moments.studies[0];
    let mut rhs = DMatrix::zeros(m0.e_xf.nrows(), m0.e_xf.ncols());
    for (s, m) in moments.studies.iter().enumerate() {
        let mut term = &m.e_xf - &lambdas[s] * m.e_fl.transpose();
        let w = psis[s].inverse_diagonal();
        for (j, mut row) in term.row_iter_mut().enumerate() {
            row *= n_s[s] as f64 * w[j];
        }
        rhs += term;
    }
    rhs
}

fn check_phi_inputs(moments: &EStepMoments, lambdas: &[DenseMatrix], psis: &[DiagMatrix], n_s: &[usize]) -> Result<()> {
    let s = moments.studies.len();
    if s == 0 || lambdas.len() != s || psis.len() != s || n_s.len() != s {
        return Err(MsfrError::ShapeMismatch(format!(
            "{s} moment blocks, {} loadings, {} variances, {} sizes",
            lambdas.len(),
            psis.len(),
            n_s.len()
        )));
    }
    Ok(())
}

/// Common loadings: solves `Σ_s n_sΨ_s⁻¹ Φ E_ff⁽ˢ⁾ = Σ_s n_sΨ_s⁻¹(E_xf⁽ˢ⁾ − Λ_sE_fl⁽ˢ⁾ᵀ)`.
///
/// With diagonal `Ψ_s` the stacked `pq x pq` system is block diagonal after
/// a permutation, so it is solved as `p` independent `q x q` systems, one per
/// response. [`cm_phi_stacked`] solves the same equation in vec form.
pub fn cm_phi(
    moments: &EStepMoments,
    lambdas: &[DenseMatrix],
    psis: &[DiagMatrix],
    n_s: &[usize],
) -> Result<DenseMatrix> {
    check_phi_inputs(moments, lambdas, psis, n_s)?;
    let q = moments.studies[0].e_ff.nrows();
    let p = moments.studies[0].c_xx.nrows();
    if q == 0 {
        return Ok(DMatrix::zeros(p, 0));
    }
    let rhs = phi_rhs(moments, lambdas, psis, n_s);
    let weights: Vec<DVector<f64>> = psis.iter().map(|d| d.inverse_diagonal()).collect();
    let mut phi = DMatrix::zeros(p, q);
    let mut a = vec![0.0; q * q];
    let mut row = vec![0.0; q];
    for j in 0..p {
        a.fill(0.0);
        for (s, m) in moments.studies.iter().enumerate() {
            let w = n_s[s] as f64 * weights[s][j];
            for (dst, src) in a.iter_mut().zip(m.e_ff.iter()) {
                *dst += w * src;
            }
        }
        for (c, v) in row.iter_mut().enumerate() {
            *v = rhs[(j, c)];
        }
        spd_solve_in_place(&mut a, &mut row)
            .map_err(|e| MsfrError::SingularSystem(format!("common loading row {j}: {e}")))?;
        for (c, v) in row.iter().enumerate() {
            phi[(j, c)] = *v;
        }
    }
    Ok(phi)
}

/// Same update as [`cm_phi`], assembled as the stacked system
/// `Σ_s (E_ff⁽ˢ⁾ᵀ ⊗ n_sΨ_s⁻¹) vec(Φ) = vec(rhs)` and handed to
/// [`solve_kron_system`].
pub fn cm_phi_stacked(
    moments: &EStepMoments,
    lambdas: &[DenseMatrix],
    psis: &[DiagMatrix],
    n_s: &[usize],
) -> Result<DenseMatrix> {
    check_phi_inputs(moments, lambdas, psis, n_s)?;
    let q = moments.studies[0].e_ff.nrows();
    let p = moments.studies[0].c_xx.nrows();
    if q == 0 {
        return Ok(DMatrix::zeros(p, 0));
    }
    let mut coef = DMatrix::zeros(p * q, p * q);
    for (s, m) in moments.studies.iter().enumerate() {
        let scaled = DMatrix::from_diagonal(&(psis[s].inverse_diagonal() * n_s[s] as f64));
        coef += kronecker(&m.e_ff.transpose(), &scaled);
    }
    let rhs = vec(&phi_rhs(moments, lambdas, psis, n_s));
    let z = solve_kron_system(&coef, &rhs)?;
    unvec(&z, p, q)
}

/// Study-specific loadings `Λ_s = (E_xl − ΦE_fl)E_ll⁻¹`.
pub fn cm_lambda(m: &StudyMoments, phi: &DenseMatrix) -> Result<DenseMatrix> {
    let p = m.c_xx.nrows();
    let qs = m.e_ll.nrows();
    if qs == 0 {
        return Ok(DMatrix::zeros(p, 0));
    }
    let target = &m.e_xl - phi * &m.e_fl;
    let solved = spd_solve(&m.e_ll, &target.transpose())?;
    Ok(solved.transpose())
}

/// How the covariate update treats per-study variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaUpdate {
    /// Row-wise generalized least squares with weights `1/ψ_js`: the exact
    /// conditional maximizer when the studies have different `Ψ_s`.
    #[default]
    PsiWeighted,
    /// Unweighted pooled formula
    /// `[Σ(x − ΦE_f − Λ_sE_l)bᵀ][Σbbᵀ]⁻¹`, exact when all `Ψ_s` coincide.
    Pooled,
}

/// Solves for `β` given per-study `R_s = Σ_i (x − ΦE_f − Λ_sE_l)bᵀ` and
/// `G_s = Σ_i bbᵀ`.
pub(crate) fn solve_beta(r: &[DenseMatrix], g: &[DenseMatrix], weights: Option<&[DiagMatrix]>) -> Result<DenseMatrix> {
    let (p, p_b) = r[0].shape();
    let singular = |e: MsfrError| MsfrError::SingularSystem(format!("covariate cross-product: {e}"));
    match weights {
        None => {
            let mut rs = DMatrix::zeros(p, p_b);
            let mut gs = DMatrix::zeros(p_b, p_b);
            for (ri, gi) in r.iter().zip(g) {
                rs += ri;
                gs += gi;
            }
            Ok(spd_solve(&gs, &rs.transpose()).map_err(singular)?.transpose())
        }
        Some(psis) => {
            let n_studies = r.len();
            // column j of `systems` is vec(Σ_s w_sj G_s); row j of `rhs` is Σ_s w_sj r_s[j, :]
            let mut weights = DMatrix::zeros(n_studies, p);
            let mut stacked = DMatrix::zeros(p_b * p_b, n_studies);
            let mut rhs = DMatrix::zeros(p, p_b);
            for s in 0..n_studies {
                let w = psis[s].inverse_diagonal();
                weights.row_mut(s).tr_copy_from(&w);
                stacked.column_mut(s).copy_from_slice(g[s].as_slice());
                for c in 0..p_b {
                    for (j, acc) in rhs.column_mut(c).iter_mut().enumerate() {
                        *acc += w[j] * r[s][(j, c)];
                    }
                }
            }
            let mut systems = &stacked * &weights;
            let size = p_b * p_b;
            let mut beta = DMatrix::zeros(p, p_b);
            let mut b = vec![0.0; p_b];
            for j in 0..p {
                for (c, v) in b.iter_mut().enumerate() {
                    *v = rhs[(j, c)];
                }
                spd_solve_in_place(&mut systems.as_mut_slice()[j * size..(j + 1) * size], &mut b).map_err(singular)?;
                for (c, v) in b.iter().enumerate() {
                    beta[(j, c)] = *v;
                }
            }
            Ok(beta)
        }
    }
}

fn beta_from_subjects(
    data: &MultiStudyData,
    phi: &DenseMatrix,
    lambdas: &[DenseMatrix],
    e_f: &[DenseMatrix],
    e_l: &[DenseMatrix],
    weights: Option<&[DiagMatrix]>,
) -> Result<DenseMatrix> {
    if data.p_b() == 0 {
        return Err(MsfrError::InvalidArgument("covariate update needs p_b >= 1".into()));
    }
    let s = data.n_studies();
    if lambdas.len() != s || e_f.len() != s || e_l.len() != s {
        return Err(MsfrError::ShapeMismatch("per-study inputs do not match the study count".into()));
    }
    let mut r = Vec::with_capacity(s);
    let mut g = Vec::with_capacity(s);
    for (k, study) in data.studies.iter().enumerate() {
        if e_f[k].shape() != (phi.ncols(), study.n()) || e_l[k].shape() != (lambdas[k].ncols(), study.n()) {
            return Err(MsfrError::ShapeMismatch(format!(
                "posterior means of study {} have the wrong shape",
                study.id
            )));
        }
        let resid = &study.x - phi * &e_f[k] - &lambdas[k] * &e_l[k];
        r.push(resid * study.b.transpose());
        g.push(&study.b * study.b.transpose());
    }
    solve_beta(&r, &g, weights)
}

/// Covariate effects from per-subject posterior means `e_f = δx̃`,
/// `e_l = δ_sx̃` (`q x n_s` and `q_s x n_s` per study), using the pooled
/// unweighted formula.
pub fn cm_beta(
    data: &MultiStudyData,
    phi: &DenseMatrix,
    lambdas: &[DenseMatrix],
    e_f: &[DenseMatrix],
    e_l: &[DenseMatrix],
) -> Result<DenseMatrix> {
    beta_from_subjects(data, phi, lambdas, e_f, e_l, None)
}

/// As [`cm_beta`], weighting each response row by the study precisions
/// `1/ψ_js`.
pub fn cm_beta_weighted(
    data: &MultiStudyData,
    phi: &DenseMatrix,
    lambdas: &[DenseMatrix],
    psis: &[DiagMatrix],
    e_f: &[DenseMatrix],
    e_l: &[DenseMatrix],
) -> Result<DenseMatrix> {
    beta_from_subjects(data, phi, lambdas, e_f, e_l, Some(psis))
}

/// Covariate update from sufficient statistics. `beta_old` is the `β` at
/// which the E-step moments were computed.
pub(crate) fn cm_beta_from_stats(
    stats: &[StudyStats],
    moments: &EStepMoments,
    beta_old: &DenseMatrix,
    phi: &DenseMatrix,
    lambdas: &[DenseMatrix],
    psis: &[DiagMatrix],
    mode: BetaUpdate,
) -> Result<DenseMatrix> {
    let mut r = Vec::with_capacity(stats.len());
    let mut g = Vec::with_capacity(stats.len());
    for (s, (st, m)) in stats.iter().zip(&moments.studies).enumerate() {
        let xb_tilde = st.residual_covariate_cross(beta_old);
        let fitted = phi * (&m.delta * &xb_tilde) + &lambdas[s] * (&m.delta_s * &xb_tilde);
        r.push(&st.sxb - fitted);
        g.push(st.sbb.clone());
    }
    match mode {
        BetaUpdate::Pooled => solve_beta(&r, &g, None),
        BetaUpdate::PsiWeighted => solve_beta(&r, &g, Some(psis)),
    }
}

//! Subject-level factor scores and the identification pass for loadings.

use std::fmt;
use std::str::FromStr;

use crate::ecm::moments::posterior_projections;
use crate::error::{MsfrError, Result};
use crate::linalg::{fix_column_signs, spd_solve, varimax, DenseMatrix};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMethod {
    /// Generalized least squares `(LᵀΨ⁻¹L)⁻¹LᵀΨ⁻¹x̃` on `L = [Φ | Λ_s]`.
    Bartlett,
    /// Posterior means `ΦᵀΣ⁻¹x̃` and `Λ_sᵀΣ⁻¹x̃`.
    Thurstone,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::Bartlett => "Bartlett",
            ScoreMethod::Thurstone => "Thurstone",
        })
    }
}

impl FromStr for ScoreMethod {
    type Err = MsfrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bartlett" => Ok(ScoreMethod::Bartlett),
            "thurstone" => Ok(ScoreMethod::Thurstone),
            other => Err(MsfrError::InvalidArgument(format!("unknown score method {other:?}"))),
        }
    }
}

/// Scores per study: `common[s]` is `q x n_s`, `specific[s]` is `q_s x n_s`.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub method: ScoreMethod,
    pub common: Vec<DenseMatrix>,
    pub specific: Vec<DenseMatrix>,
}

fn check_inputs(xtilde: &[DenseMatrix], params: &Params) -> Result<()> {
    if xtilde.len() != params.n_studies() {
        return Err(MsfrError::ShapeMismatch(format!(
            "{} data blocks for {} studies",
            xtilde.len(),
            params.n_studies()
        )));
    }
    if let Some(x) = xtilde.iter().find(|x| x.nrows() != params.p()) {
        return Err(MsfrError::ShapeMismatch(format!("data block has {} rows, expected {}", x.nrows(), params.p())));
    }
    Ok(())
}

/// Scores for a single study `s`.
pub fn study_scores(
    method: ScoreMethod,
    xtilde: &DenseMatrix,
    params: &Params,
    s: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    match method {
        ScoreMethod::Thurstone => {
            let (delta, delta_s, _, _) = posterior_projections(&params.phi, &params.lambdas[s], &params.psis[s])?;
            Ok((delta * xtilde, delta_s * xtilde))
        }
        ScoreMethod::Bartlett => {
            let l = params.stacked_loadings(s);
            let q = params.q();
            let k = l.ncols();
            let inv_psi = params.psis[s].inverse_diagonal();
            let mut weighted = l.clone();
            for (j, mut row) in weighted.row_iter_mut().enumerate() {
                row *= inv_psi[j];
            }
            let gram = l.transpose() * &weighted;
            let rhs = weighted.transpose() * xtilde;
            let joint = spd_solve(&gram, &rhs).map_err(|e| {
                MsfrError::SingularSystem(format!("stacked loadings of study {s} are rank deficient: {e}"))
            })?;
            Ok((joint.rows(0, q).into_owned(), joint.rows(q, k - q).into_owned()))
        }
    }
}

pub fn thurstone_scores(xtilde: &[DenseMatrix], params: &Params) -> Result<ScoreMatrix> {
    scores(ScoreMethod::Thurstone, xtilde, params)
}

pub fn bartlett_scores(xtilde: &[DenseMatrix], params: &Params) -> Result<ScoreMatrix> {
    scores(ScoreMethod::Bartlett, xtilde, params)
}

pub fn scores(method: ScoreMethod, xtilde: &[DenseMatrix], params: &Params) -> Result<ScoreMatrix> {
    check_inputs(xtilde, params)?;
    let mut common = Vec::with_capacity(xtilde.len());
    let mut specific = Vec::with_capacity(xtilde.len());
    for (s, x) in xtilde.iter().enumerate() {
        let (c, sp) = study_scores(method, x, params, s)?;
        common.push(c);
        specific.push(sp);
    }
    Ok(ScoreMatrix { method, common, specific })
}

fn rotate_and_sign(l: &DenseMatrix) -> DenseMatrix {
    let mut out = if l.ncols() >= 2 { varimax(l).loadings } else { l.clone() };
    fix_column_signs(&mut out);
    out
}

/// Varimax-rotates `Φ` (and each `Λ_s` with two or more columns), then makes
/// the largest-magnitude loading of every column positive. `β` and `Ψ_s` are
/// unchanged, and so is every `Σ_s`.
pub fn identify(params: &Params) -> Params {
    Params {
        beta: params.beta.clone(),
        phi: rotate_and_sign(&params.phi),
        lambdas: params.lambdas.iter().map(rotate_and_sign).collect(),
        psis: params.psis.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DiagMatrix;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, DMatrix};

    fn params(phi: DenseMatrix, lambda: DenseMatrix, psi: Vec<f64>) -> Params {
        let p = phi.nrows();
        Params {
            beta: DMatrix::zeros(p, 0),
            phi,
            lambdas: vec![lambda],
            psis: vec![DiagMatrix::from_vec(psi).unwrap()],
        }
    }

    #[test]
    fn zero_data_gives_zero_scores() {
        let pr = params(dmatrix![0.8; 0.3; 0.1], dmatrix![0.1; -0.5; 0.7], vec![0.5, 0.6, 0.7]);
        let x = vec![DMatrix::zeros(3, 4)];
        for m in [ScoreMethod::Thurstone, ScoreMethod::Bartlett] {
            let sc = scores(m, &x, &pr).unwrap();
            assert!(sc.common[0].iter().all(|v| *v == 0.0));
            assert!(sc.specific[0].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn bartlett_orthonormal_projection() {
        let s = 0.5_f64.sqrt();
        let pr = params(dmatrix![s; s; 0.0], dmatrix![0.0; 0.0; 1.0], vec![1.0; 3]);
        let x = dmatrix![1.0, 2.0; 3.0, -1.0; 0.5, 4.0];
        let sc = bartlett_scores(std::slice::from_ref(&x), &pr).unwrap();
        let expected = pr.stacked_loadings(0).transpose() * &x;
        assert_relative_eq!(sc.common[0], expected.rows(0, 1).into_owned(), epsilon = 1e-12);
        assert_relative_eq!(sc.specific[0], expected.rows(1, 1).into_owned(), epsilon = 1e-12);
    }

    #[test]
    fn bartlett_rank_deficient() {
        let pr = params(dmatrix![1.0; 1.0; 0.0], dmatrix![2.0; 2.0; 0.0], vec![1.0; 3]);
        assert!(matches!(bartlett_scores(&[DMatrix::zeros(3, 1)], &pr), Err(MsfrError::SingularSystem(_))));
    }

    #[test]
    fn single_factor_identify_only_fixes_sign() {
        let pr = params(dmatrix![-0.9; 0.2; 0.1], dmatrix![0.1; -0.5; 0.2], vec![1.0; 3]);
        let id = identify(&pr);
        assert_eq!(id.phi, dmatrix![0.9; -0.2; -0.1]);
        assert_eq!(id.lambdas[0], dmatrix![-0.1; 0.5; -0.2]);
    }

    #[test]
    fn score_method_parses() {
        assert_eq!("bartlett".parse::<ScoreMethod>().unwrap(), ScoreMethod::Bartlett);
        assert!("pca".parse::<ScoreMethod>().is_err());
    }
}

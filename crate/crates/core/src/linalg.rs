//! Dense matrix kernels shared by the fitter: Kronecker products and the vec
//! operator, stacked linear solves, low-rank-plus-diagonal inversion, varimax
//! rotation and the RV similarity coefficient.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries in column-major
//! order, so `vec` is a copy of the backing slice.

use nalgebra::{DMatrix, DVector};

use crate::error::{MsfrError, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Relative pivot magnitude below which a solve is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Positive diagonal matrix, stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagMatrix(DVector<f64>);

impl DiagMatrix {
    pub fn new(diagonal: DVector<f64>) -> Result<Self> {
        if let Some((j, v)) = diagonal.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(MsfrError::DegenerateInput(format!("diagonal entry {j} must be positive and finite, got {v}")));
        }
        Ok(DiagMatrix(diagonal))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(values))
    }

    pub fn identity(dim: usize) -> Self {
        DiagMatrix(DVector::from_element(dim, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn inverse_diagonal(&self) -> DVector<f64> {
        self.0.map(|v| 1.0 / v)
    }

    pub fn log_det(&self) -> f64 {
        self.0.iter().map(|v| v.ln()).sum()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DMatrix::from_diagonal(&self.0)
    }
}

/// Kronecker product: block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kronecker(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (m, n) = a.shape();
    let (r, q) = b.shape();
    let mut out = DMatrix::zeros(m * r, n * q);
    for j in 0..n {
        for i in 0..m {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for bj in 0..q {
                for bi in 0..r {
                    out[(i * r + bi, j * q + bj)] = aij * b[(bi, bj)];
                }
            }
        }
    }
    out
}

/// Stacks the columns of `a` into a single vector.
pub fn vec(a: &DenseMatrix) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec`] for an `rows x cols` shape.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.len() != rows * cols {
        return Err(MsfrError::ShapeMismatch(format!(
            "cannot reshape vector of length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

fn max_abs(m: &DenseMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// LU factorization with partial pivoting, kept in packed form.
struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &DenseMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(MsfrError::ShapeMismatch(format!("expected a square matrix, got {}x{}", n, a.ncols())));
        }
        let scale = max_abs(a);
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (piv, pval) =
                (k..n)
                    .map(|i| (i, lu[(i, k)].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pval > PIVOT_TOLERANCE * scale) {
                return Err(MsfrError::SingularSystem(format!(
                    "pivot {pval:.3e} at column {k} is below {PIVOT_TOLERANCE:e} x scale {scale:.3e}"
                )));
            }
            if piv != k {
                lu.swap_rows(piv, k);
                perm.swap(piv, k);
            }
            let d = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.lu.nrows();
        let mut x = DVector::from_iterator(n, self.perm.iter().map(|&i| rhs[i]));
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }
}

/// Solves the square system `coef * z = rhs`, as produced by stacking a
/// Kronecker-structured matrix equation with the vec operator.
///
/// One round of iterative refinement is applied after the LU solve.
pub fn solve_kron_system(coef: &DenseMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if coef.nrows() != rhs.len() {
        return Err(MsfrError::ShapeMismatch(format!(
            "coefficient matrix has {} rows but right-hand side has length {}",
            coef.nrows(),
            rhs.len()
        )));
    }
    let lu = Lu::factor(coef)?;
    let mut z = lu.solve(rhs);
    let residual = rhs - coef * &z;
    z += lu.solve(&residual);
    Ok(z)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with `SingularSystem` when a squared pivot falls below
/// `PIVOT_TOLERANCE` times the largest diagonal entry.
pub fn cholesky_lower(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(MsfrError::ShapeMismatch(format!("expected a square matrix, got {}x{}", n, a.ncols())));
    }
    let scale = (0..n).fold(0.0_f64, |acc, i| acc.max(a[(i, i)].abs()));
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOLERANCE * scale) {
            return Err(MsfrError::SingularSystem(format!(
                "Cholesky pivot {d:.3e} at index {j} is not positive relative to scale {scale:.3e}"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `a * x = b` for symmetric positive definite `a` via Cholesky.
pub fn spd_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, b.ncols()));
    }
    let l = cholesky_lower(a)?;
    let n = a.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// In-place Cholesky solve of a small SPD system. `a` (`n x n`,
/// column-major) is overwritten by its factor and `b` by the solution.
pub(crate) fn spd_solve_in_place(a: &mut [f64], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[k * n + j] * a[k * n + j];
        }
        if !(d > PIVOT_TOLERANCE * scale) || !d.is_finite() {
            return Err(MsfrError::SingularSystem(format!("pivot {j} of a {n}x{n} system is not positive")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = a[j * n + i];
            for k in 0..j {
                v -= a[k * n + i] * a[k * n + j];
            }
            a[j * n + i] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.nrows();
    let inv = spd_solve(a, &DMatrix::identity(n, n))?;
    Ok(symmetrize(&inv))
}

/// `log|a|` for symmetric positive definite `a`.
pub fn spd_log_det(a: &DenseMatrix) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let l = cholesky_lower(a)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn symmetrize(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

/// `(L Lᵀ + Ψ)⁻¹` through the Woodbury identity
/// `Ψ⁻¹ − Ψ⁻¹L(I + LᵀΨ⁻¹L)⁻¹LᵀΨ⁻¹`; only the `k x k` core is inverted.
pub fn woodbury_inverse(psi: &DiagMatrix, l: &DenseMatrix) -> Result<DenseMatrix> {
    let p = psi.dim();
    if l.nrows() != p {
        return Err(MsfrError::ShapeMismatch(format!(
            "loadings have {} rows but the diagonal has dimension {p}",
            l.nrows()
        )));
    }
    let k = l.ncols();
    let inv_psi = psi.inverse_diagonal();
    let mut out = DMatrix::from_diagonal(&inv_psi);
    if k == 0 {
        return Ok(out);
    }
    // Ψ⁻¹L
    let mut scaled = l.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= inv_psi[i];
    }
    let core = DMatrix::identity(k, k) + l.transpose() * &scaled;
    let core_solved = spd_solve(&core, &scaled.transpose())?;
    out -= &scaled * core_solved;
    Ok(symmetrize(&out))
}

/// Result of a varimax rotation.
#[derive(Debug, Clone)]
pub struct VarimaxRotation {
    /// `loadings * rotation`.
    pub loadings: DenseMatrix,
    /// Orthogonal `k x k` rotation.
    pub rotation: DenseMatrix,
    /// Varimax criterion of the Kaiser-normalized rotated loadings.
    pub criterion: f64,
    /// Criterion value after each completed sweep.
    pub criterion_trace: Vec<f64>,
}

pub const VARIMAX_TOLERANCE: f64 = 1e-7;
pub const VARIMAX_MAX_SWEEPS: usize = 1000;

fn kaiser_weights(l: &DenseMatrix) -> DVector<f64> {
    DVector::from_iterator(
        l.nrows(),
        l.row_iter().map(|r| {
            let h = r.norm();
            if h > 0.0 {
                h
            } else {
                1.0
            }
        }),
    )
}

fn raw_varimax_criterion(normalized: &DenseMatrix) -> f64 {
    let p = normalized.nrows() as f64;
    normalized
        .column_iter()
        .map(|c| {
            let s2: f64 = c.iter().map(|v| v * v).sum::<f64>() / p;
            let s4: f64 = c.iter().map(|v| v.powi(4)).sum::<f64>() / p;
            s4 - s2 * s2
        })
        .sum()
}

/// Varimax criterion of the row-normalized (Kaiser) loadings: the summed
/// per-column variance of squared loadings.
pub fn varimax_criterion(l: &DenseMatrix) -> f64 {
    let w = kaiser_weights(l);
    let mut normalized = l.clone();
    for (i, mut row) in normalized.row_iter_mut().enumerate() {
        row /= w[i];
    }
    raw_varimax_criterion(&normalized)
}

/// Kaiser's varimax: pairwise planar rotations of the row-normalized
/// loadings, repeated in sweeps until the criterion gains less than
/// `VARIMAX_TOLERANCE` or `VARIMAX_MAX_SWEEPS` sweeps have run.
pub fn varimax(l: &DenseMatrix) -> VarimaxRotation {
    let k = l.ncols();
    let p = l.nrows();
    if k <= 1 || p == 0 {
        return VarimaxRotation {
            loadings: l.clone(),
            rotation: DMatrix::identity(k, k),
            criterion: varimax_criterion(l),
            criterion_trace: Vec::new(),
        };
    }
    let w = kaiser_weights(l);
    let mut x = l.clone();
    for (i, mut row) in x.row_iter_mut().enumerate() {
        row /= w[i];
    }
    let mut rotation = DMatrix::<f64>::identity(k, k);
    let mut criterion = raw_varimax_criterion(&x);
    let mut trace = Vec::new();
    let pf = p as f64;
    for _ in 0..VARIMAX_MAX_SWEEPS {
        for a in 0..k - 1 {
            for b in (a + 1)..k {
                let (mut su, mut sv, mut suu, mut suv) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p {
                    let (xa, xb) = (x[(i, a)], x[(i, b)]);
                    let u = xa * xa - xb * xb;
                    let v = 2.0 * xa * xb;
                    su += u;
                    sv += v;
                    suu += u * u - v * v;
                    suv += 2.0 * u * v;
                }
                let num = suv - 2.0 * su * sv / pf;
                let den = suu - (su * su - sv * sv) / pf;
                let angle = 0.25 * num.atan2(den);
                if angle.abs() < 1e-15 {
                    continue;
                }
                let (s, c) = angle.sin_cos();
                for i in 0..p {
                    let (xa, xb) = (x[(i, a)], x[(i, b)]);
                    x[(i, a)] = c * xa + s * xb;
                    x[(i, b)] = -s * xa + c * xb;
                }
                for i in 0..k {
                    let (ra, rb) = (rotation[(i, a)], rotation[(i, b)]);
                    rotation[(i, a)] = c * ra + s * rb;
                    rotation[(i, b)] = -s * ra + c * rb;
                }
            }
        }
        let next = raw_varimax_criterion(&x);
        trace.push(next);
        let gain = next - criterion;
        criterion = next;
        if gain < VARIMAX_TOLERANCE {
            break;
        }
    }
    VarimaxRotation { loadings: l * &rotation, rotation, criterion, criterion_trace: trace }
}

/// RV coefficient between two positive semidefinite matrices of equal size:
/// `tr(SA SB) / sqrt(tr(SA²) tr(SB²))`.
pub fn rv_coefficient_psd(sa: &DenseMatrix, sb: &DenseMatrix) -> Result<f64> {
    if sa.shape() != sb.shape() || sa.nrows() != sa.ncols() {
        return Err(MsfrError::ShapeMismatch(format!(
            "RV needs equal square matrices, got {:?} and {:?}",
            sa.shape(),
            sb.shape()
        )));
    }
    // Elementwise sums in a fixed order keep RV(A, B) == RV(B, A) bitwise.
    let mut cross = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in sa.iter().zip(sb.iter()) {
        cross += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(MsfrError::DegenerateInput("RV coefficient of a zero matrix is undefined".into()));
    }
    let denom = (aa * bb).sqrt();
    Ok((cross / denom).clamp(0.0, 1.0))
}

/// RV coefficient of two column blocks sharing their row dimension, computed
/// on the cross-products `AAᵀ` and `BBᵀ`.
pub fn rv_coefficient(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(MsfrError::ShapeMismatch(format!(
            "RV arguments must share row count, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    rv_coefficient_psd(&(a * a.transpose()), &(b * b.transpose()))
}

/// Leading `k` eigenpairs of a symmetric matrix, eigenvalues descending.
/// Each eigenvector is signed so that its largest-magnitude entry is positive.
pub fn top_eigen(a: &DenseMatrix, k: usize) -> (DVector<f64>, DenseMatrix) {
    let n = a.nrows();
    let k = k.min(n);
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let values = DVector::from_iterator(k, order[..k].iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, k);
    for (c, &i) in order[..k].iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    fix_column_signs(&mut vectors);
    (values, vectors)
}

/// Flips columns so that each column's largest-magnitude entry is positive.
pub fn fix_column_signs(m: &mut DenseMatrix) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col *= -1.0;
        }
    }
}

/// Smallest over largest singular value; zero for an empty or null matrix.
pub fn column_rank_ratio(m: &DenseMatrix) -> f64 {
    if m.ncols() == 0 {
        return 1.0;
    }
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        return 0.0;
    }
    sv.min() / max
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn kron_of_unit_scalar_is_identity_map() {
        let b = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        assert_eq!(kronecker(&DMatrix::identity(1, 1), &b), b);
    }

    #[test]
    fn kron_small_expansion() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        let b = dmatrix![0.0, 1.0; 1.0, 0.0];
        let expected = dmatrix![
            0.0, 1.0, 0.0, 2.0;
            1.0, 0.0, 2.0, 0.0;
            0.0, 3.0, 0.0, 4.0;
            3.0, 0.0, 4.0, 0.0
        ];
        assert_eq!(kronecker(&a, &b), expected);
    }

    #[test]
    fn kron_shape_rule() {
        let k = kronecker(&DMatrix::from_element(2, 3, 1.0), &DMatrix::from_element(4, 5, 1.0));
        assert_eq!(k.shape(), (8, 15));
    }

    #[test]
    fn vec_stacks_columns() {
        let a = dmatrix![1.0, 3.0; 2.0, 4.0];
        assert_eq!(vec(&a).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&dmatrix![7.5]).as_slice(), &[7.5]);
        assert!(unvec(&vec(&a), 3, 1).is_err());
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let r = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let z = solve_kron_system(&DMatrix::identity(3, 3), &r).unwrap();
        assert_eq!(z, r);
        let z = solve_kron_system(&dmatrix![2.0, 0.0; 0.0, 4.0], &DVector::from_vec(vec![2.0, 8.0])).unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(z[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn solve_rejects_singular() {
        let a = dmatrix![1.0, 2.0; 2.0, 4.0];
        let err = solve_kron_system(&a, &DVector::from_vec(vec![1.0, 1.0])).unwrap_err();
        assert!(matches!(err, MsfrError::SingularSystem(_)));
    }

    #[test]
    fn woodbury_degenerate_cases() {
        let psi = DiagMatrix::from_vec(vec![2.0, 4.0]).unwrap();
        let w = woodbury_inverse(&psi, &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(w, dmatrix![0.5, 0.0; 0.0, 0.25]);
        let psi = DiagMatrix::from_vec(vec![2.0]).unwrap();
        let w = woodbury_inverse(&psi, &dmatrix![1.0]).unwrap();
        assert_relative_eq!(w[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn diag_matrix_rejects_nonpositive() {
        assert!(DiagMatrix::from_vec(vec![1.0, 0.0]).is_err());
        assert!(DiagMatrix::from_vec(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn varimax_single_column_is_identity() {
        let l = dmatrix![0.3; -0.8; 0.5];
        let r = varimax(&l);
        assert_eq!(r.rotation, dmatrix![1.0]);
        assert_eq!(r.loadings, l);
    }

    #[test]
    fn rv_of_zero_matrix_is_degenerate() {
        let a = DMatrix::zeros(3, 2);
        let b = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(rv_coefficient(&a, &b), Err(MsfrError::DegenerateInput(_))));
        assert!(rv_coefficient(&b, &DMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky_lower(&dmatrix![1.0, 2.0; 2.0, 1.0]).is_err());
        let l = cholesky_lower(&dmatrix![4.0, 2.0; 2.0, 3.0]).unwrap();
        assert_relative_eq!(&l * l.transpose(), dmatrix![4.0, 2.0; 2.0, 3.0], epsilon = 1e-14);
    }

    #[test]
    fn top_eigen_sorted_and_signed() {
        let a = dmatrix![1.0, 0.0, 0.0; 0.0, 3.0, 0.0; 0.0, 0.0, 2.0];
        let (vals, vecs) = top_eigen(&a, 2);
        assert_relative_eq!(vals[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(vecs[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vecs[(2, 1)], 1.0, epsilon = 1e-12);
    }
}

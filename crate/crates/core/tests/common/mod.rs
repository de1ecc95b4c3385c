//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use msfr::linalg::{DenseMatrix, DiagMatrix};
use msfr::{MultiStudyData, Params, StudyDataset};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Dense random parameters with loadings scaled by `scale` and variances in
/// `[0.2, 1.2)`.
pub fn random_params(rng: &mut ChaCha8Rng, p: usize, p_b: usize, q: usize, q_s: &[usize], scale: f64) -> Params {
    Params {
        beta: normal_matrix(rng, p, p_b),
        phi: normal_matrix(rng, p, q) * scale,
        lambdas: q_s.iter().map(|&k| normal_matrix(rng, p, k) * scale).collect(),
        psis: q_s
            .iter()
            .map(|_| DiagMatrix::from_vec((0..p).map(|_| 0.2 + rng.random::<f64>()).collect()).unwrap())
            .collect(),
    }
}

/// Draws data from the model with nalgebra's own Cholesky.
pub fn sample_data(rng: &mut ChaCha8Rng, params: &Params, n_s: &[usize]) -> MultiStudyData {
    let studies = n_s
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let chol = params.sigma(s).cholesky().expect("Σ is SPD").l();
            let b = normal_matrix(rng, params.p_b(), n);
            let x = &params.beta * &b + chol * normal_matrix(rng, params.p(), n);
            StudyDataset::new(format!("s{s}"), x, b).unwrap()
        })
        .collect();
    MultiStudyData::new(studies).unwrap()
}

/// `Σ_s` built term by term.
pub fn sigma_direct(params: &Params, s: usize) -> DenseMatrix {
    &params.phi * params.phi.transpose()
        + &params.lambdas[s] * params.lambdas[s].transpose()
        + DMatrix::from_diagonal(params.psis[s].diagonal())
}

/// Joint-Gaussian conditioning of `z = (f, l)` on `x̃` with `Σ⁻¹` from an LU
/// inverse: returns `KᵀΣ⁻¹` and `I − KᵀΣ⁻¹K`.
pub fn direct_posterior(params: &Params, s: usize) -> (DenseMatrix, DenseMatrix) {
    let k = params.stacked_loadings(s);
    let sigma_inv = sigma_direct(params, s).lu().try_inverse().expect("Σ invertible");
    let proj = k.transpose() * &sigma_inv;
    let var = DMatrix::identity(k.ncols(), k.ncols()) - &proj * &k;
    (proj, var)
}

/// Subject-averaged conditional moments from per-subject posterior means.
/// Returns `(E_ff, E_ll, E_fl, E_xf, E_xl)`.
pub fn moments_by_subject(xtilde: &DenseMatrix, params: &Params, s: usize) -> [DenseMatrix; 5] {
    let q = params.q();
    let qs = params.lambdas[s].ncols();
    let (proj, var) = direct_posterior(params, s);
    let n = xtilde.ncols() as f64;
    let mut e_zz = DMatrix::zeros(q + qs, q + qs);
    let mut e_xz = DMatrix::zeros(params.p(), q + qs);
    for x in xtilde.column_iter() {
        let mu = &proj * x;
        e_zz += &mu * mu.transpose() + &var;
        e_xz += x * mu.transpose();
    }
    e_zz /= n;
    e_xz /= n;
    [
        e_zz.view((0, 0), (q, q)).into_owned(),
        e_zz.view((q, q), (qs, qs)).into_owned(),
        e_zz.view((0, q), (q, qs)).into_owned(),
        e_xz.columns(0, q).into_owned(),
        e_xz.columns(q, qs).into_owned(),
    ]
}

/// Pooled multivariate least squares via an SVD solve of the stacked design.
pub fn ols_oracle(data: &MultiStudyData) -> DenseMatrix {
    let n: usize = data.n_total();
    let mut x = DMatrix::zeros(n, data.p());
    let mut b = DMatrix::zeros(n, data.p_b());
    let mut row = 0;
    for st in &data.studies {
        x.rows_mut(row, st.n()).copy_from(&st.x.transpose());
        b.rows_mut(row, st.n()).copy_from(&st.b.transpose());
        row += st.n();
    }
    b.svd(true, true).solve(&x, 1e-14).expect("svd solve").transpose()
}

/// Central finite-difference gradient of `f` in every coordinate of `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `‖a − b‖_max / max(‖b‖_max, 1e-300)`.
pub fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.amax().max(1e-300);
    (a - b).amax() / scale
}

fn kaiser_criterion(l: &DenseMatrix) -> f64 {
    let p = l.nrows() as f64;
    let h: DVector<f64> = DVector::from_iterator(l.nrows(), l.row_iter().map(|r| r.norm()));
    let mut total = 0.0;
    for c in l.column_iter() {
        let sq: Vec<f64> = c.iter().zip(h.iter()).map(|(v, hj)| (v / hj).powi(2)).collect();
        let mean = sq.iter().sum::<f64>() / p;
        total += sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
    }
    total
}

fn planar(l: &DenseMatrix, theta: f64) -> DenseMatrix {
    let (s, c) = theta.sin_cos();
    l * nalgebra::dmatrix![c, -s; s, c]
}

/// Two-factor varimax by scanning the rotation angle over a quarter turn and
/// refining with golden-section search. Returns the rotated loadings.
pub fn varimax_grid_oracle(l: &DenseMatrix) -> DenseMatrix {
    assert_eq!(l.ncols(), 2);
    let quarter = std::f64::consts::FRAC_PI_2;
    let steps = 20_000;
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..steps {
        let t = -quarter / 2.0 + quarter * i as f64 / steps as f64;
        let v = kaiser_criterion(&planar(l, t));
        if v > best.1 {
            best = (t, v);
        }
    }
    let (mut a, mut b) = (best.0 - quarter / steps as f64, best.0 + quarter / steps as f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if kaiser_criterion(&planar(l, c)) > kaiser_criterion(&planar(l, d)) {
            b = d;
        } else {
            a = c;
        }
    }
    planar(l, 0.5 * (a + b))
}

/// Aligns the columns of `a` to `b` up to permutation and sign and returns
/// the max-abs difference.
pub fn aligned_diff_2(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let mut best = f64::INFINITY;
    for perm in [[0usize, 1], [1, 0]] {
        for s0 in [1.0, -1.0] {
            for s1 in [1.0, -1.0] {
                let mut m = DMatrix::zeros(a.nrows(), 2);
                m.set_column(0, &(a.column(perm[0]) * s0));
                m.set_column(1, &(a.column(perm[1]) * s1));
                best = best.min((m - b).amax());
            }
        }
    }
    best
}

/// Pearson correlation of two equally long slices.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

//! Small shared linear-algebra helpers on top of the LAPACK bindings.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::{Eigh, SVD, UPLO};

/// Moore-Penrose pseudoinverse via SVD with a relative singular value cutoff.
pub fn pinv(a: &ArrayView2<f64>, rel_cutoff: f64) -> Result<Array2<f64>> {
    let (u, s, vt) = a.svd(true, true)?;
    let u = u.expect("svd with u");
    let vt = vt.expect("svd with vt");
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let k = s.len();
    let mut inv = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        if smax > 0.0 && s[i] > rel_cutoff * smax {
            inv[(i, i)] = 1.0 / s[i];
        }
    }
    // A^+ = V S^+ U^T, using only the leading k singular triplets.
    Ok(vt.slice(ndarray::s![..k, ..]).t().dot(&inv).dot(&u.slice(ndarray::s![.., ..k]).t()))
}

/// Pseudoinverse that fails when the matrix is numerically rank deficient.
pub fn pinv_with_check(
    a: &ArrayView2<f64>,
    rel_cutoff: f64,
    rank_tol: f64,
    name: &str,
) -> Result<Array2<f64>> {
    let ratio = min_max_singular_ratio(a)?;
    if !(ratio > rank_tol) {
        return Err(Error::RankDeficient {
            name: name.to_string(),
            ratio,
        });
    }
    pinv(a, rel_cutoff)
}

/// sigma_min / sigma_max over the min(nrows, ncols) singular values.
pub fn min_max_singular_ratio(a: &ArrayView2<f64>) -> Result<f64> {
    let (_, s, _) = a.svd(false, false)?;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax == 0.0 {
        return Ok(0.0);
    }
    Ok(smin / smax)
}

/// Largest singular value.
pub fn spectral_norm(a: &ArrayView2<f64>) -> Result<f64> {
    let (_, s, _) = a.svd(false, false)?;
    Ok(s.iter().cloned().fold(0.0f64, f64::max))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues descending.
pub fn eigh_desc(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (vals, vecs) = a.eigh(UPLO::Lower)?;
    let n = vals.len();
    let mut vals_d = Array1::<f64>::zeros(n);
    let mut vecs_d = Array2::<f64>::zeros(vecs.raw_dim());
    for i in 0..n {
        vals_d[i] = vals[n - 1 - i];
        vecs_d.column_mut(i).assign(&vecs.column(n - 1 - i));
    }
    Ok((vals_d, vecs_d))
}

/// Max column 2-norm, the 2->infinity operator norm of the transpose map.
pub fn max_column_norm(a: &ArrayView2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .fold(0.0, f64::max)
}

/// Pivoted Cholesky of a PSD matrix; returns the pivot order and the index at
/// which the residual diagonal drops below `tol` (numerical rank).
pub fn pivoted_cholesky_rank(g: &Array2<f64>, tol: f64) -> (Vec<usize>, usize) {
    let n = g.nrows();
    let mut diag: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
    let mut l = Array2::<f64>::zeros((n, n));
    let mut piv: Vec<usize> = (0..n).collect();
    let mut rank = n;
    for k in 0..n {
        let (j_rel, &dmax) = diag[k..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let j = k + j_rel;
        if dmax <= tol {
            rank = k;
            break;
        }
        piv.swap(k, j);
        diag.swap(k, j);
        for r in 0..n {
            l.swap((k, r), (j, r));
        }
        let root = diag[k].sqrt();
        l[(k, k)] = root;
        for i in k + 1..n {
            let mut v = g[(piv[i], piv[k])];
            for r in 0..k {
                v -= l[(i, r)] * l[(k, r)];
            }
            l[(i, k)] = v / root;
            diag[i] -= l[(i, k)] * l[(i, k)];
        }
    }
    (piv, rank)
}

//! Subspace extraction: stack vectorized Hessians, take the leading singular
//! subspace, and expose the orthoprojector used by the recovery step.

use crate::derivatives::HessianBatch;
use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::io::{Read, Write};
use std::sync::OnceLock;

/// Orthoprojector onto an m-dimensional subspace of symmetric D x D matrices.
///
/// The basis is stored row-wise: `basis` is (m, D^2) with orthonormal rows,
/// each row the vectorization of a symmetric matrix. Rows are sign-fixed so
/// that the entry of largest magnitude is positive, making the basis
/// independent of backend/thread-count sign conventions.
#[derive(Debug)]
pub struct SubspaceProjector {
    d: usize,
    basis: Array2<f64>,
    singular_values: Vec<f64>,
    bstack: OnceLock<Array2<f64>>,
    bstack_f32: OnceLock<Array2<f32>>,
}

impl Clone for SubspaceProjector {
    fn clone(&self) -> Self {
        SubspaceProjector {
            d: self.d,
            basis: self.basis.clone(),
            singular_values: self.singular_values.clone(),
            bstack: OnceLock::new(),
            bstack_f32: OnceLock::new(),
        }
    }
}

/// Result of applying every basis matrix to one direction u.
pub struct OuterApply {
    /// c_k = u^T B_k u; the objective is ||c||^2.
    pub coeffs: Array1<f64>,
    /// Row k holds B_k u.
    pub applied: Array2<f64>,
}

impl OuterApply {
    pub fn phi(&self) -> f64 {
        self.coeffs.dot(&self.coeffs)
    }

    /// P(u (x) u) u = sum_k c_k B_k u.
    pub fn projected_direction(&self) -> Array1<f64> {
        self.applied.t().dot(&self.coeffs)
    }
}

impl SubspaceProjector {
    pub(crate) fn from_basis(d: usize, basis: Array2<f64>, singular_values: Vec<f64>) -> Self {
        let mut basis = basis;
        canonicalize_row_signs(&mut basis);
        SubspaceProjector {
            d,
            basis,
            singular_values,
            bstack: OnceLock::new(),
            bstack_f32: OnceLock::new(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.d
    }

    /// Subspace dimension m.
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    /// All singular values retained from the decomposition, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Gap diagnostic sigma_m / sigma_{m+1}; infinite when no tail remains.
    pub fn singular_gap(&self) -> f64 {
        let m = self.dim();
        if m == 0 || self.singular_values.len() < m {
            return f64::NAN;
        }
        if self.singular_values.len() == m {
            return f64::INFINITY;
        }
        let tail = self.singular_values[m];
        if tail == 0.0 {
            f64::INFINITY
        } else {
            self.singular_values[m - 1] / tail
        }
    }

    /// Basis matrices unfolded and stacked: rows k*D..(k+1)*D hold B_k.
    pub(crate) fn stacked_basis(&self) -> &Array2<f64> {
        self.bstack.get_or_init(|| {
            let (m, d) = (self.dim(), self.d);
            let mut out = Array2::<f64>::zeros((m * d, d));
            for k in 0..m {
                for i in 0..d {
                    for j in 0..d {
                        out[(k * d + i, j)] = self.basis[(k, i * d + j)];
                    }
                }
            }
            out
        })
    }

    pub(crate) fn stacked_basis_f32(&self) -> &Array2<f32> {
        self.bstack_f32
            .get_or_init(|| self.stacked_basis().mapv(|v| v as f32))
    }

    /// Coefficients <B_k, A> of a symmetric matrix A.
    pub fn coeffs_sym(&self, a: &ArrayView2<f64>) -> Array1<f64> {
        let flat = a.to_owned().into_shape_with_order(self.d * self.d).unwrap();
        self.basis.dot(&flat)
    }

    /// Orthogonal projection of a symmetric matrix onto the subspace.
    pub fn apply_sym(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let c = self.coeffs_sym(a);
        let flat = self.basis.t().dot(&c);
        flat.into_shape_with_order((self.d, self.d)).unwrap()
    }

    /// ||P(A)||_F for a symmetric A without materializing the projection.
    pub fn projection_norm_sym(&self, a: &ArrayView2<f64>) -> f64 {
        self.coeffs_sym(a).dot(&self.coeffs_sym(a)).sqrt()
    }

    /// Apply every basis matrix to a direction u.
    pub fn outer_apply(&self, u: &ArrayView1<f64>) -> OuterApply {
        let (m, d) = (self.dim(), self.d);
        let z_flat = self.stacked_basis().dot(u); // (m*d)
        let applied = z_flat.into_shape_with_order((m, d)).unwrap();
        let coeffs = applied.dot(u);
        OuterApply { coeffs, applied }
    }

    /// max |B B^T - I| over entries; sanity diagnostic.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.basis.dot(&self.basis.t());
        let m = self.dim();
        let mut err = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((g[(i, j)] - want).abs());
            }
        }
        err
    }

    /// max asymmetry |B_k - B_k^T| over basis matrices.
    pub fn symmetry_error(&self) -> f64 {
        let d = self.d;
        let mut err = 0.0f64;
        for row in self.basis.rows() {
            for i in 0..d {
                for j in i + 1..d {
                    err = err.max((row[i * d + j] - row[j * d + i]).abs());
                }
            }
        }
        err
    }

    pub fn export_json<W: Write>(&self, mut w: W) -> Result<()> {
        let doc = serde_json::json!({
            "d": self.d,
            "m": self.dim(),
            "singular_values": self.singular_values,
            "basis": self.basis.as_slice().expect("contiguous").to_vec(),
        });
        serde_json::to_writer(&mut w, &doc)?;
        Ok(())
    }

    pub fn import_json<R: Read>(r: R) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Doc {
            d: usize,
            m: usize,
            singular_values: Vec<f64>,
            basis: Vec<f64>,
        }
        let doc: Doc = serde_json::from_reader(r)?;
        if doc.basis.len() != doc.m * doc.d * doc.d {
            return Err(Error::InvalidConfig(
                "projector payload does not match header dimensions".into(),
            ));
        }
        let basis = Array2::from_shape_vec((doc.m, doc.d * doc.d), doc.basis)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(SubspaceProjector::from_basis(
            doc.d,
            basis,
            doc.singular_values,
        ))
    }
}

fn canonicalize_row_signs(basis: &mut Array2<f64>) {
    for mut row in basis.rows_mut() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, v) in row.iter().enumerate() {
            let a = v.abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

/// Build the projector onto the leading m-dimensional singular subspace of the
/// stacked Hessian matrix.
pub fn build_context(batch: &HessianBatch, m: usize) -> Result<SubspaceProjector> {
    let a = batch.stacked_vecs();
    build_from_stacked(&a.view(), batch.d, m)
}

/// As [`build_context`], but starting from already-stacked rows vec(H).
pub(crate) fn build_from_stacked(
    a: &ArrayView2<f64>,
    d: usize,
    m: usize,
) -> Result<SubspaceProjector> {
    let cols = a.nrows();
    if m == 0 {
        return Err(Error::InvalidConfig("subspace dimension must be positive".into()));
    }
    if m > cols {
        return Err(Error::SubspaceTooLarge {
            requested: m,
            available: cols,
        });
    }
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::NoSecondOrderInformation);
    }
    let d2 = d * d;
    if cols <= d2 {
        let gram = a.dot(&a.t());
        build_from_gram(a, &gram, d, m)
    } else {
        // More samples than ambient matrix entries: decompose the small side.
        let gram = a.t().dot(a); // (d^2, d^2)
        let (vals, vecs) = linalg::eigh_desc(&gram)?;
        let sv: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
        check_rank(&sv, m)?;
        let mut basis = Array2::<f64>::zeros((m, d2));
        for k in 0..m {
            basis.row_mut(k).assign(&vecs.column(k));
        }
        finish_basis(d, basis, sv)
    }
}

/// Build from rows plus their precomputed Gram matrix (reused by the
/// leave-one-out constructions).
pub(crate) fn build_from_gram(
    a: &ArrayView2<f64>,
    gram: &Array2<f64>,
    d: usize,
    m: usize,
) -> Result<SubspaceProjector> {
    let (vals, vecs) = linalg::eigh_desc(gram)?;
    let sv: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    check_rank(&sv, m)?;
    let mut basis = vecs.slice(ndarray::s![.., ..m]).t().dot(a);
    for (k, mut row) in basis.rows_mut().into_iter().enumerate() {
        row /= sv[k];
    }
    finish_basis(d, basis, sv)
}

fn check_rank(sv: &[f64], m: usize) -> Result<()> {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(Error::NoSecondOrderInformation);
    }
    let rank = sv.iter().filter(|&&s| s > 1e-13 * smax).count();
    if rank < m {
        return Err(Error::RankBelowSubspace { rank, requested: m });
    }
    Ok(())
}

fn finish_basis(d: usize, mut basis: Array2<f64>, sv: Vec<f64>) -> Result<SubspaceProjector> {
    // The span lies in Sym(R^{DxD}); fold numerical asymmetry back.
    for mut row in basis.rows_mut() {
        for i in 0..d {
            for j in i + 1..d {
                let avg = 0.5 * (row[i * d + j] + row[j * d + i]);
                row[i * d + j] = avg;
                row[j * d + i] = avg;
            }
        }
    }
    let proj = SubspaceProjector::from_basis(d, basis, sv);
    if proj.orthonormality_error() > 1e-10 {
        // Re-orthonormalize through the small Gram of the rows.
        let g = proj.basis.dot(&proj.basis.t());
        let (vals, vecs) = linalg::eigh_desc(&g)?;
        let m = proj.dim();
        let mut fixed = vecs.t().dot(&proj.basis);
        for (k, mut row) in fixed.rows_mut().into_iter().enumerate() {
            if vals[k] <= 0.0 {
                return Err(Error::RankBelowSubspace {
                    rank: k,
                    requested: m,
                });
            }
            row /= vals[k].sqrt();
        }
        return Ok(SubspaceProjector::from_basis(
            proj.d,
            fixed,
            proj.singular_values,
        ));
    }
    Ok(proj)
}

/// Ground-truth projector spanned by outer products w_i (x) w_i.
pub fn exact_projector(weights: &ArrayView2<f64>) -> Result<SubspaceProjector> {
    let d = weights.nrows();
    let k = weights.ncols();
    if k == 0 {
        return Ok(SubspaceProjector::from_basis(
            d,
            Array2::zeros((0, d * d)),
            Vec::new(),
        ));
    }
    // Gram of the outer products: G_ij = <w_i, w_j>^2.
    let inner = weights.t().dot(weights);
    let gram = &inner * &inner;
    let scale = (0..k).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
    let (piv, rank) = linalg::pivoted_cholesky_rank(&gram, 1e-10 * scale.max(1e-300));
    if rank < k {
        let mut dependent: Vec<usize> = piv[rank..].to_vec();
        dependent.sort_unstable();
        return Err(Error::DependentOuterProducts { indices: dependent });
    }
    let mut vmat = Array2::<f64>::zeros((k, d * d));
    for (idx, col) in weights.columns().into_iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                vmat[(idx, i * d + j)] = col[i] * col[j];
            }
        }
    }
    let (vals, vecs) = linalg::eigh_desc(&gram)?;
    let mut basis = vecs.t().dot(&vmat);
    let mut sv = Vec::with_capacity(k);
    for (r, mut row) in basis.rows_mut().into_iter().enumerate() {
        let lam = vals[r].max(0.0);
        if lam <= 0.0 {
            return Err(Error::DependentOuterProducts { indices: vec![r] });
        }
        row /= lam.sqrt();
        sv.push(lam.sqrt());
    }
    Ok(SubspaceProjector::from_basis(d, basis, sv))
}

/// ||P_1 - P_2||_F / sqrt(m_1), the scaled projector distance.
///
/// Computed from the mutual projection residuals
/// ||B_1 - (B_1 B_2^T) B_2||_F^2 + ||B_2 - (B_2 B_1^T) B_1||_F^2, which equals
/// m_1 + m_2 - 2 ||B_1 B_2^T||_F^2 but avoids the cancellation that would
/// otherwise floor the result near sqrt(m * eps).
pub fn subspace_distance(p1: &SubspaceProjector, p2: &SubspaceProjector) -> f64 {
    assert_eq!(
        p1.ambient_dim(),
        p2.ambient_dim(),
        "projectors live on different ambient dimensions"
    );
    let cross = p1.basis.dot(&p2.basis.t());
    let r1 = &p1.basis - &cross.dot(&p2.basis);
    let r2 = &p2.basis - &cross.t().dot(&p1.basis);
    let sq = r1.iter().map(|v| v * v).sum::<f64>() + r2.iter().map(|v| v * v).sum::<f64>();
    sq.sqrt() / (p1.dim() as f64).sqrt()
}

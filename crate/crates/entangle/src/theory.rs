//! Executable forms of the supporting theory: frame constants, the Gram
//! reformulation of the objective, Lipschitz/size bounds, the spurious
//! local-maximizer construction, and the subspace error bound constants.

use crate::context::SubspaceProjector;
use crate::derivatives::{self, HessianBatch, SamplingLaw};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::NetworkParams;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::Serialize;

/// Frame diagnostics of a set of unit vectors.
#[derive(Debug, Clone, Serialize)]
pub struct FrameReport {
    /// nu = max(lambda_max - 1, 1 - lambda_min) of sum w_i w_i^T.
    pub nu: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Extreme eigenvalues of the Gram matrix G_ij = <w_i, w_j>^2.
    pub gram_min: f64,
    pub gram_max: f64,
}

impl FrameReport {
    pub fn frame_condition_holds(&self) -> bool {
        self.nu < 1.0
    }
}

/// Evaluate the frame constant of unit vectors (columns of `weights`).
pub fn frame_constant(weights: &ArrayView2<f64>) -> Result<FrameReport> {
    let d = weights.nrows();
    let mut s = Array2::<f64>::zeros((d, d));
    for col in weights.columns() {
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] += col[i] * col[j];
            }
        }
    }
    let (vals, _) = linalg::eigh_desc(&s)?;
    let lambda_max = vals[0];
    let lambda_min = vals[vals.len() - 1];
    let inner = weights.t().dot(weights);
    let gram = &inner * &inner;
    let (gvals, _) = linalg::eigh_desc(&gram)?;
    Ok(FrameReport {
        nu: (lambda_max - 1.0).max(1.0 - lambda_min),
        lambda_min,
        lambda_max,
        gram_min: gvals[gvals.len() - 1],
        gram_max: gvals[0],
    })
}

/// Phi through the Gram matrix: beta^T G^{-1} beta with beta_i = <u, w_i>^2.
pub fn gram_phi(weights: &ArrayView2<f64>, u: &ArrayView1<f64>) -> Result<f64> {
    let inner = weights.t().dot(weights);
    let gram = &inner * &inner;
    let (vals, vecs) = linalg::eigh_desc(&gram)?;
    let k = vals.len();
    if k == 0 {
        return Ok(0.0);
    }
    if vals[k - 1] <= 1e-12 * vals[0].max(1e-300) {
        return Err(Error::SingularGram);
    }
    let dots = weights.t().dot(u);
    let beta = &dots * &dots;
    // beta^T G^{-1} beta via the eigen-decomposition.
    let coeffs = vecs.t().dot(&beta);
    Ok(coeffs
        .iter()
        .zip(vals.iter())
        .map(|(c, l)| c * c / l)
        .sum())
}

/// One evaluated inequality: left side, right side, and their ratio.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Worst-case ratios of the three layerwise bounds over a set of point pairs:
/// the norm bound on V_l(x), the Lipschitz bound on V_l(x) - V_l(x'), and the
/// Frobenius bound on S_p^l(x). All ratios must stay at or below one.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub v_norm: BoundCheck,
    pub v_diff: BoundCheck,
    pub s_norm: BoundCheck,
    pub pairs_checked: usize,
}

pub fn lipschitz_bound_check(
    net: &NetworkParams,
    pairs: &[(Array1<f64>, Array1<f64>)],
) -> Result<LipschitzReport> {
    let depth = net.depth();
    let kappa = net.activation().kappa();
    let w_norms: Vec<f64> = (0..depth)
        .map(|l| linalg::spectral_norm(&net.weight(l).view()))
        .collect::<Result<_>>()?;
    let w_2inf: Vec<f64> = (0..depth)
        .map(|l| linalg::max_column_norm(&net.weight(l).view()))
        .collect();
    let prod = |from: usize, to: usize| -> f64 { w_norms[from..to].iter().product() };

    let mut worst = LipschitzReport {
        v_norm: BoundCheck { lhs: 0.0, rhs: 0.0, ratio: 0.0 },
        v_diff: BoundCheck { lhs: 0.0, rhs: 0.0, ratio: 0.0 },
        s_norm: BoundCheck { lhs: 0.0, rhs: 0.0, ratio: 0.0 },
        pairs_checked: pairs.len(),
    };
    let update = |slot: &mut BoundCheck, lhs: f64, rhs: f64| {
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if ratio > slot.ratio {
            *slot = BoundCheck { lhs, rhs, ratio };
        }
    };

    for (x, x2) in pairs {
        let ew_a = net.entangled_weights(&x.view())?;
        let ew_b = net.entangled_weights(&x2.view())?;
        let s_a = derivatives::layer_s_factors(net, &x.view())?;
        let dx = (&x.view().to_owned() - x2).mapv(|v| v * v).sum().sqrt();
        for l in 0..depth {
            // ||V_l(x)|| <= kappa^{l-1} prod_{k<=l} ||W_k||.
            let lhs = linalg::spectral_norm(&ew_a.mats[l].view())?;
            let rhs = kappa.powi(l as i32) * prod(0, l + 1);
            update(&mut worst.v_norm, lhs, rhs);

            // ||V_l(x) - V_l(x')|| <= (prod_{k<=l} ||W_k||)
            //   * sum_{k<l} kappa^{l+k-2} ||W_k||_{2->inf} (prod_{j<k} ||W_j||) ||x - x'||.
            let diff = &ew_a.mats[l] - &ew_b.mats[l];
            let lhs = linalg::spectral_norm(&diff.view())?;
            let mut factor = 0.0;
            for k in 0..l {
                factor +=
                    kappa.powi((l + k) as i32) * w_2inf[k] * prod(0, k);
            }
            let rhs = prod(0, l + 1) * factor * dx;
            update(&mut worst.v_diff, lhs, rhs);

            // ||S_p^l(x)||_F <= kappa^{L-l+1} prod_{k>l} ||W_k||.
            let rhs = kappa.powi((depth - l) as i32) * prod(l + 1, depth);
            for p in 0..net.output_dim() {
                let col = s_a[l].column(p);
                let lhs = col.dot(&col).sqrt();
                update(&mut worst.s_norm, lhs, rhs);
            }
        }
    }
    Ok(worst)
}

/// Rank-one perturbation subspace span{ sqrt(1-delta) w (x) w - sqrt(delta)
/// u (x) u } for orthogonal unit w, u. Its objective has a spurious local
/// maximizer at u with value exactly delta, while staying within 2 sqrt(delta)
/// of span{w (x) w} in operator norm.
pub fn spurious_subspace(
    w: &ArrayView1<f64>,
    u: &ArrayView1<f64>,
    delta: f64,
) -> Result<SubspaceProjector> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
    }
    if w.dot(u).abs() > 1e-12 {
        return Err(Error::InvalidConfig(
            "spurious construction needs orthogonal directions".into(),
        ));
    }
    let d = w.len();
    let a = (1.0 - delta).sqrt();
    let b = delta.sqrt();
    let mut basis = Array2::<f64>::zeros((1, d * d));
    for i in 0..d {
        for j in 0..d {
            basis[(0, i * d + j)] = a * w[i] * w[j] - b * u[i] * u[j];
        }
    }
    Ok(SubspaceProjector::from_basis(d, basis, vec![1.0]))
}

/// Operator (2->2) distance between two projectors on vectorized matrices,
/// via a dense materialization; intended for small ambient dimensions.
pub fn operator_distance(p1: &SubspaceProjector, p2: &SubspaceProjector) -> Result<f64> {
    let d2 = p1.ambient_dim() * p1.ambient_dim();
    let m1 = p1.basis().t().dot(p1.basis());
    let m2 = p2.basis().t().dot(p2.basis());
    let diff = &m1 - &m2;
    debug_assert_eq!(diff.nrows(), d2);
    linalg::spectral_norm(&diff.view())
}

/// Constants of the subspace approximation error bound, with the universal
/// constant set to one, plus the empirical learnability spectrum value.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub kappa: f64,
    pub c_bar: f64,
    /// m-th eigenvalue of the Monte-Carlo second-moment matrix of vectorized
    /// Hessians; zero means the architecture is not identifiable this way.
    pub alpha: f64,
    /// max_p sup_x ||Delta_eps - Hessian||_F over the sampled locations.
    pub c_eps_hat: f64,
    /// Sub-Gaussian norm of X - x* for the law (R/sqrt(D) on the sphere).
    pub subgauss: f64,
    /// Right-hand side of the projector error bound; infinite if the
    /// denominator is not positive.
    pub bound_rhs: f64,
    pub identifiable: bool,
}

/// Evaluate kappa, the network-complexity constant, the empirical alpha from
/// `n_samples` Monte-Carlo locations, and the resulting error bound.
pub fn theorem_constants(
    net: &NetworkParams,
    law: &SamplingLaw,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TheoremReport> {
    let kappa = net.activation().kappa();
    let depth = net.depth();
    let w_norms: Vec<f64> = (0..depth)
        .map(|l| linalg::spectral_norm(&net.weight(l).view()))
        .collect::<Result<_>>()?;
    let w_2inf: Vec<f64> = (0..depth)
        .map(|l| linalg::max_column_norm(&net.weight(l).view()))
        .collect();
    let prod = |from: usize, to: usize| -> f64 { w_norms[from..to].iter().product() };
    let mut c_bar = 0.0;
    for l in 1..depth {
        let mut inner = 0.0;
        for k in 0..l {
            inner += kappa.powi((l + k) as i32) * w_2inf[k] * prod(0, k);
        }
        c_bar += prod(0, l + 1) * inner;
    }
    c_bar *= kappa.powi(depth as i32) * prod(0, depth);

    let m = net.total_neurons();
    let m_l = net.output_dim();
    let mut rng = crate::stage_rng(seed, "theorem-alpha");
    let batch = HessianBatch::sample_analytic(net, law, n_samples, &mut rng)?;
    let a = batch.stacked_vecs();
    let count = a.nrows();
    let alpha = if count < m {
        0.0
    } else {
        let gram = a.dot(&a.t());
        let (vals, _) = linalg::eigh_desc(&gram)?;
        (vals[m - 1] / n_samples as f64).max(0.0)
    };

    // Hessian approximation error on a small subsample of locations.
    let mut c_eps_hat = 0.0f64;
    let check = batch.n_locations().min(8);
    for i in 0..check {
        let x = batch.locations.row(i).to_owned();
        let fd = derivatives::fd_hessians(net, &x.view(), eps)?;
        for p in 0..m_l {
            let exact = &batch.mats[p * batch.n_locations() + i];
            let err = (&fd[p] - exact).mapv(|v| v * v).sum().sqrt();
            c_eps_hat = c_eps_hat.max(err);
        }
    }

    let subgauss = match law {
        SamplingLaw::UniformSphere { radius, center } => radius / (center.len() as f64).sqrt(),
        SamplingLaw::Gaussian { sigma, .. } => *sigma,
    };
    let d = net.input_dim() as f64;
    let denom = alpha / 2.0 - m_l as f64 * c_eps_hat * c_eps_hat;
    let bound_rhs = if denom > 0.0 {
        2.0 * (m_l as f64).sqrt() * (c_eps_hat + c_bar * d.sqrt() * subgauss) / denom.sqrt()
    } else {
        f64::INFINITY
    };
    let identifiable = alpha > 1e-12;
    Ok(TheoremReport {
        kappa,
        c_bar,
        alpha,
        c_eps_hat,
        subgauss,
        bound_rhs,
        identifiable,
    })
}

/// Random unit vector orthogonal to `w`.
pub fn random_orthogonal_unit<R: Rng>(w: &ArrayView1<f64>, rng: &mut R) -> Array1<f64> {
    loop {
        let mut v = crate::net::unit_sphere_sample(w.len(), rng);
        let c = v.dot(w);
        v.zip_mut_with(w, |a, &b| *a -= c * b);
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            v /= n;
            return v;
        }
    }
}

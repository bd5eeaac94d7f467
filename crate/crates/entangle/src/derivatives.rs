//! Analytic network derivatives, finite-difference Hessian approximation, and
//! the sampling laws used to place Hessian locations.

use crate::error::{Error, Result};
use crate::net::{unit_sphere_sample, NetworkParams};
use crate::par;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

/// Black-box access to the network: one call evaluates every output at a
/// batch of points.
pub trait QueryOracle: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64>;
}

impl QueryOracle for NetworkParams {
    fn input_dim(&self) -> usize {
        NetworkParams::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        NetworkParams::output_dim(self)
    }

    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        NetworkParams::eval_batch(self, x).expect("oracle input dimension mismatch")
    }
}

/// Wraps an oracle and counts issued point queries (rows).
pub struct CountingOracle<'a, O: QueryOracle + ?Sized> {
    inner: &'a O,
    count: AtomicU64,
}

impl<'a, O: QueryOracle + ?Sized> CountingOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        CountingOracle {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn queries(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<'a, O: QueryOracle + ?Sized> QueryOracle for CountingOracle<'a, O> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.count.fetch_add(x.nrows() as u64, Ordering::Relaxed);
        self.inner.eval_batch(x)
    }
}

/// Input distribution for Hessian locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingLaw {
    UniformSphere { radius: f64, center: Vec<f64> },
    Gaussian { sigma: f64, mean: Vec<f64> },
}

impl SamplingLaw {
    pub fn uniform_sphere(dim: usize, radius: f64) -> Self {
        SamplingLaw::UniformSphere {
            radius,
            center: vec![0.0; dim],
        }
    }

    pub fn gaussian(dim: usize, sigma: f64) -> Self {
        SamplingLaw::Gaussian {
            sigma,
            mean: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SamplingLaw::UniformSphere { center, .. } => center.len(),
            SamplingLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SamplingLaw::UniformSphere { radius, .. } => *radius > 0.0,
            SamplingLaw::Gaussian { sigma, .. } => *sigma > 0.0,
        };
        if ok && self.dim() > 0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "sampling law needs a positive scale and nonempty center".into(),
            ))
        }
    }

    pub fn center(&self) -> ArrayView1<'_, f64> {
        match self {
            SamplingLaw::UniformSphere { center, .. } => ArrayView1::from(center.as_slice()),
            SamplingLaw::Gaussian { mean, .. } => ArrayView1::from(mean.as_slice()),
        }
    }
}

/// Draw `n` i.i.d. locations; rows of the result.
pub fn sample_points<R: Rng>(
    law: &SamplingLaw,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    law.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let d = law.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    match law {
        SamplingLaw::UniformSphere { radius, center } => {
            for mut row in out.rows_mut() {
                let s = unit_sphere_sample(d, rng);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = center[j] + radius * s[j];
                }
            }
        }
        SamplingLaw::Gaussian { sigma, mean } => {
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = mean[j] + sigma * z;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of output `p`: W_1 G_1(x) ... W_L G_L(x) e_p.
pub fn analytic_gradient(net: &NetworkParams, x: &ArrayView1<f64>, p: usize) -> Result<Array1<f64>> {
    let pass = net.forward(x)?;
    let depth = net.depth();
    let mut v = Array1::<f64>::zeros(net.output_dim());
    v[p] = 1.0;
    for l in (0..depth).rev() {
        let g1 = pass.pre[l].mapv(|z| net.activation().g1(z));
        v = net.weight(l).dot(&(&v * &g1));
    }
    Ok(v)
}

/// Diagonal factors of the layerwise Hessian decomposition: for each layer l
/// an (m_l x m_L) matrix whose column p holds diag(S_p^l(x)) =
/// g''(z_l) .* (prod_{k=l+1}^L W_k G_k) e_p.
pub fn layer_s_factors(net: &NetworkParams, x: &ArrayView1<f64>) -> Result<Vec<Array2<f64>>> {
    let pass = net.forward(x)?;
    let depth = net.depth();
    let m_l = net.output_dim();
    let mut back: Vec<Array2<f64>> = vec![Array2::eye(m_l); depth];
    for l in (0..depth - 1).rev() {
        let g1 = pass.pre[l + 1].mapv(|z| net.activation().g1(z));
        let scaled = &back[l + 1] * &g1.view().insert_axis(Axis(1));
        back[l] = net.weight(l + 1).dot(&scaled);
    }
    Ok((0..depth)
        .map(|l| {
            let g2 = pass.pre[l].mapv(|z| net.activation().g2(z));
            &back[l] * &g2.view().insert_axis(Axis(1))
        })
        .collect())
}

/// Hessians of every output at one location, sharing the forward pass.
///
/// H_p = sum_l V_l(x) diag(g''(z_l) .* b_p^l) V_l(x)^T, where b_p^l is the
/// column of the layerwise backward product selecting output p.
pub fn analytic_hessians(net: &NetworkParams, x: &ArrayView1<f64>) -> Result<Vec<Array2<f64>>> {
    let ew = net.entangled_weights(x)?;
    let s_factors = layer_s_factors(net, x)?;
    let depth = net.depth();
    let m_l = net.output_dim();
    let d = net.input_dim();
    let mut hessians = Vec::with_capacity(m_l);
    for p in 0..m_l {
        let mut h = Array2::<f64>::zeros((d, d));
        for l in 0..depth {
            let s_vec = s_factors[l].column(p);
            let scaled = &ew.mats[l] * &s_vec.insert_axis(Axis(0));
            h = h + scaled.dot(&ew.mats[l].t());
        }
        hessians.push(symmetrize(&h));
    }
    Ok(hessians)
}

/// Hessian of a single output.
pub fn analytic_hessian(net: &NetworkParams, x: &ArrayView1<f64>, p: usize) -> Result<Array2<f64>> {
    let mut all = analytic_hessians(net, x)?;
    if p >= all.len() {
        return Err(Error::InvalidConfig(format!(
            "output index {p} out of range (m_L = {})",
            all.len()
        )));
    }
    Ok(all.swap_remove(p))
}

fn symmetrize(h: &Array2<f64>) -> Array2<f64> {
    let n = h.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (h[(i, j)] + h[(j, i)]);
        }
    }
    out
}

/// Symmetric finite-difference Hessians of all outputs at `x`.
///
/// Off-diagonal entries use the 4-point cross stencil; diagonal entries
/// degenerate to the second central difference with step 2*eps. Stencil
/// values are shared across outputs: one oracle row yields all m_L outputs.
pub fn fd_hessians<O: QueryOracle + ?Sized>(
    oracle: &O,
    x: &ArrayView1<f64>,
    eps: f64,
) -> Result<Vec<Array2<f64>>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let d = oracle.input_dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: d,
            got: x.len(),
        });
    }
    let m_l = oracle.output_dim();
    let n_off = d * (d - 1) / 2;
    let n_rows = 4 * n_off + 2 * d + 1;
    let mut stencil = Array2::<f64>::zeros((n_rows, d));
    for mut row in stencil.rows_mut() {
        row.assign(x);
    }
    let mut r = 0;
    for i in 0..d {
        for j in i + 1..d {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                stencil[(r, i)] += si * eps;
                stencil[(r, j)] += sj * eps;
                r += 1;
            }
        }
    }
    let diag_base = r;
    for i in 0..d {
        stencil[(r, i)] += 2.0 * eps;
        stencil[(r + 1, i)] -= 2.0 * eps;
        r += 2;
    }
    let center_row = r;
    debug_assert_eq!(center_row + 1, n_rows);

    let values = oracle.eval_batch(&stencil.view());
    if let Some(row) = values
        .rows()
        .into_iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteOracle {
            point: stencil.row(row).to_vec(),
        });
    }

    let scale = 1.0 / (4.0 * eps * eps);
    let mut hessians = vec![Array2::<f64>::zeros((d, d)); m_l];
    let mut idx = 0;
    for i in 0..d {
        for j in i + 1..d {
            for (p, h) in hessians.iter_mut().enumerate() {
                let v = (values[(idx, p)] - values[(idx + 1, p)] - values[(idx + 2, p)]
                    + values[(idx + 3, p)])
                    * scale;
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            idx += 4;
        }
    }
    for i in 0..d {
        let plus = diag_base + 2 * i;
        for (p, h) in hessians.iter_mut().enumerate() {
            h[(i, i)] = (values[(plus, p)] - 2.0 * values[(center_row, p)]
                + values[(plus + 1, p)])
                * scale;
        }
    }
    Ok(hessians)
}

/// Oracle queries used by one finite-difference Hessian location (all outputs).
pub fn fd_query_count(d: usize) -> u64 {
    (2 * d * d + 1) as u64
}

/// How a batch of Hessians was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Analytic,
    Fd { eps: f64 },
}

/// Hessians of all outputs at a batch of sampled locations.
///
/// Matrices are stored output-major: index `p * n_locations + i` holds the
/// Hessian of output `p` at location `i`, matching the column layout of the
/// stacked matrix handed to the subspace step.
#[derive(Debug, Clone)]
pub struct HessianBatch {
    pub locations: Array2<f64>,
    pub mats: Vec<Array2<f64>>,
    pub d: usize,
    pub m_l: usize,
    pub provenance: Provenance,
    pub law: SamplingLaw,
}

impl HessianBatch {
    pub fn n_locations(&self) -> usize {
        self.locations.nrows()
    }

    pub fn count(&self) -> usize {
        self.mats.len()
    }

    fn from_per_location(
        locations: Array2<f64>,
        per_loc: Vec<Vec<Array2<f64>>>,
        d: usize,
        m_l: usize,
        provenance: Provenance,
        law: SamplingLaw,
    ) -> Self {
        let n = per_loc.len();
        let mut mats = Vec::with_capacity(n * m_l);
        for p in 0..m_l {
            for loc in &per_loc {
                mats.push(loc[p].clone());
            }
        }
        HessianBatch {
            locations,
            mats,
            d,
            m_l,
            provenance,
            law,
        }
    }

    pub fn sample_analytic<R: Rng>(
        net: &NetworkParams,
        law: &SamplingLaw,
        n_locations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let points = sample_points(law, n_locations, rng)?;
        let rows: Vec<Array1<f64>> = points.rows().into_iter().map(|r| r.to_owned()).collect();
        let per_loc = par::map_slice(&rows, |x| {
            analytic_hessians(net, &x.view()).expect("forward pass on sampled point")
        });
        Ok(Self::from_per_location(
            points,
            per_loc,
            net.input_dim(),
            net.output_dim(),
            Provenance::Analytic,
            law.clone(),
        ))
    }

    pub fn sample_fd<O: QueryOracle + ?Sized, R: Rng>(
        oracle: &O,
        law: &SamplingLaw,
        n_locations: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let points = sample_points(law, n_locations, rng)?;
        let rows: Vec<Array1<f64>> = points.rows().into_iter().map(|r| r.to_owned()).collect();
        let per_loc = par::map_slice(&rows, |x| fd_hessians(oracle, &x.view(), eps));
        let per_loc = per_loc.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self::from_per_location(
            points,
            per_loc,
            oracle.input_dim(),
            oracle.output_dim(),
            Provenance::Fd { eps },
            law.clone(),
        ))
    }

    /// Stack vec(H) as rows: one (count x D^2) matrix. All matrices are
    /// symmetric, so row-major and column-major vectorization coincide.
    pub fn stacked_vecs(&self) -> Array2<f64> {
        let d2 = self.d * self.d;
        let mut out = Array2::<f64>::zeros((self.mats.len(), d2));
        for (r, h) in self.mats.iter().enumerate() {
            out.row_mut(r)
                .assign(&ArrayView1::from(h.as_slice().expect("contiguous")));
        }
        out
    }

    /// CSV export: a JSON header line, then one row per (location, output)
    /// pair with the vectorized matrix.
    pub fn export_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::json!({
            "d": self.d,
            "m_l": self.m_l,
            "n_locations": self.n_locations(),
            "provenance": self.provenance,
            "law": self.law,
        });
        writeln!(w, "# {header}")?;
        for p in 0..self.m_l {
            for i in 0..self.n_locations() {
                let h = &self.mats[p * self.n_locations() + i];
                let mut fields = Vec::with_capacity(2 + self.d * self.d);
                fields.push(i.to_string());
                fields.push(p.to_string());
                fields.extend(h.iter().map(|v| format!("{v}")));
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }
}

//! Feedforward network model: evaluation, random sampling, entangled weight
//! matrices, and the loss-free reparametrization from recovered weights.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Shift standard deviation used when sampling random teachers.
pub const SHIFT_STD: f64 = 0.05;

/// Scalar activation, supplying derivatives up to third order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Identity activation. Second-order information vanishes; used by tests
    /// and theory checks as the degenerate case.
    Linear,
}

impl Activation {
    #[inline]
    pub fn g(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    #[inline]
    pub fn g1(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }

    #[inline]
    pub fn g2(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Linear => 0.0,
        }
    }

    #[inline]
    pub fn g3(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                -2.0 * s * (1.0 - 3.0 * t * t)
            }
            Activation::Linear => 0.0,
        }
    }

    /// max_{k=1..3} sup |g^(k)|. For tanh the third derivative attains the
    /// maximum, |g'''(0)| = 2.
    pub fn kappa(self) -> f64 {
        match self {
            Activation::Tanh => 2.0,
            Activation::Linear => 1.0,
        }
    }
}

/// Architecture descriptor: widths decay geometrically with the contraction
/// factor from the first hidden layer, the output width is pinned, and
/// rounding slack is absorbed by the largest layers so the widths sum to the
/// requested neuron total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub depth: usize,
    pub output_dim: usize,
    pub total_neurons: usize,
    pub contraction: f64,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        depth: usize,
        output_dim: usize,
        total_neurons: usize,
        contraction: f64,
    ) -> Result<Self> {
        let arch = Architecture {
            input_dim,
            depth,
            output_dim,
            total_neurons,
            contraction,
        };
        arch.layer_widths()?;
        Ok(arch)
    }

    /// Hidden + output widths (m_1, ..., m_L). The input dimension is not
    /// included.
    pub fn layer_widths(&self) -> Result<Vec<usize>> {
        let (depth, m_l, m, c) = (
            self.depth,
            self.output_dim,
            self.total_neurons,
            self.contraction,
        );
        if self.input_dim == 0 || depth == 0 || m_l == 0 {
            return Err(Error::InvalidArchitecture(
                "dimensions must be positive".into(),
            ));
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::InvalidArchitecture(format!(
                "contraction factor must lie in (0, 1], got {c}"
            )));
        }
        if depth == 1 {
            if m != m_l {
                return Err(Error::InvalidArchitecture(format!(
                    "single-layer network needs total_neurons == output_dim ({m} != {m_l})"
                )));
            }
            return Ok(vec![m_l]);
        }
        let hidden_layers = depth - 1;
        if m < m_l + hidden_layers * m_l {
            return Err(Error::InvalidArchitecture(format!(
                "total_neurons {m} too small for {hidden_layers} hidden layers of width >= {m_l}"
            )));
        }
        let budget = m - m_l;
        let geo: Vec<f64> = (0..hidden_layers).map(|k| c.powi(k as i32)).collect();
        let norm: f64 = geo.iter().sum();
        let targets: Vec<f64> = geo.iter().map(|w| budget as f64 * w / norm).collect();
        let mut widths: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
        let mut deficit = budget - widths.iter().sum::<usize>();
        // Hand out the rounding remainder by largest fractional part; ties go
        // to the earlier (wider) layer, which keeps widths nonincreasing.
        let mut order: Vec<usize> = (0..hidden_layers).collect();
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter() {
            if deficit == 0 {
                break;
            }
            widths[i] += 1;
            deficit -= 1;
        }
        // Keep the network pyramidal down to the output layer.
        for w in widths.iter_mut() {
            if *w < m_l {
                *w = m_l;
            }
        }
        let mut excess = widths.iter().sum::<usize>() as i64 - budget as i64;
        while excess > 0 {
            let i = (0..hidden_layers)
                .max_by_key(|&i| (widths[i], std::cmp::Reverse(i)))
                .unwrap();
            if widths[i] <= m_l {
                return Err(Error::InvalidArchitecture(
                    "cannot satisfy neuron budget with nonincreasing widths".into(),
                ));
            }
            widths[i] -= 1;
            excess -= 1;
        }
        widths.push(m_l);
        debug_assert_eq!(widths.iter().sum::<usize>(), m);
        debug_assert!(widths.windows(2).all(|w| w[0] >= w[1]));
        Ok(widths)
    }
}

/// Weight matrices, shifts and activation of a feedforward network.
///
/// Layer `l` holds `weights[l]` of shape `(m_{l-1}, m_l)` whose columns are
/// the neuron weight vectors, applied as `y_{l} = g(W_l^T y_{l-1} + tau_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    weights: Vec<Array2<f64>>,
    shifts: Vec<Array1<f64>>,
    activation: Activation,
    seed: Option<u64>,
}

/// Per-layer pre-activations and activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `pre[l] = W_{l+1}^T y_l + tau_{l+1}` for `l = 0..L`.
    pub pre: Vec<Array1<f64>>,
    /// `post[l] = g(pre[l])`; the last entry is the network output.
    pub post: Vec<Array1<f64>>,
}

impl ForwardPass {
    pub fn outputs(&self) -> &Array1<f64> {
        self.post.last().expect("network has at least one layer")
    }
}

impl NetworkParams {
    pub fn new(
        weights: Vec<Array2<f64>>,
        shifts: Vec<Array1<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != shifts.len() {
            return Err(Error::InvalidArchitecture(format!(
                "need equally many weight matrices and shift vectors (>=1), got {} and {}",
                weights.len(),
                shifts.len()
            )));
        }
        for (l, (w, tau)) in weights.iter().zip(shifts.iter()).enumerate() {
            if w.ncols() != tau.len() {
                return Err(Error::DimensionMismatch {
                    layer: l + 1,
                    expected: w.ncols(),
                    got: tau.len(),
                });
            }
            if w.ncols() == 0 || w.nrows() == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {} has an empty weight matrix",
                    l + 1
                )));
            }
            if l > 0 && weights[l - 1].ncols() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    layer: l + 1,
                    expected: weights[l - 1].ncols(),
                    got: w.nrows(),
                });
            }
        }
        Ok(NetworkParams {
            weights,
            shifts,
            activation,
            seed: None,
        })
    }

    /// Draw a random network: weight columns uniform on the unit sphere of the
    /// incoming dimension, shifts i.i.d. N(0, SHIFT_STD^2).
    pub fn sample<R: Rng>(
        input_dim: usize,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let shift_law = Normal::new(0.0, SHIFT_STD).expect("valid normal");
        let mut weights = Vec::with_capacity(widths.len());
        let mut shifts = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &width in widths {
            let mut w = Array2::<f64>::zeros((prev, width));
            for j in 0..width {
                let mut col = unit_sphere_sample(prev, rng);
                while col.iter().all(|v| *v == 0.0) {
                    col = unit_sphere_sample(prev, rng);
                }
                w.column_mut(j).assign(&col);
            }
            let tau = Array1::from_iter((0..width).map(|_| shift_law.sample(rng)));
            weights.push(w);
            shifts.push(tau);
            prev = width;
        }
        NetworkParams::new(weights, shifts, activation)
    }

    /// Sample from an architecture descriptor with a dedicated seed.
    pub fn sample_from_arch(arch: &Architecture, activation: Activation, seed: u64) -> Result<Self> {
        let widths = arch.layer_widths()?;
        let mut rng = crate::stage_rng(seed, "teacher");
        let mut net = Self::sample(arch.input_dim, &widths, activation, &mut rng)?;
        net.seed = Some(seed);
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// All widths (m_0 = D, m_1, ..., m_L).
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.weights.iter().map(|m| m.ncols()));
        w
    }

    pub fn total_neurons(&self) -> usize {
        self.weights.iter().map(|m| m.ncols()).sum()
    }

    pub fn is_pyramidal(&self) -> bool {
        self.widths().windows(2).all(|w| w[0] >= w[1])
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn shift(&self, layer: usize) -> &Array1<f64> {
        &self.shifts[layer]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// In-place SGD update used by the training baselines.
    pub(crate) fn apply_gradient_step(
        &mut self,
        w_grads: &[Array2<f64>],
        s_grads: &[Array1<f64>],
        lr: f64,
    ) {
        for (w, g) in self.weights.iter_mut().zip(w_grads.iter()) {
            w.zip_mut_with(g, |a, &b| *a -= lr * b);
        }
        for (s, g) in self.shifts.iter_mut().zip(s_grads.iter()) {
            s.zip_mut_with(g, |a, &b| *a -= lr * b);
        }
    }

    #[cfg(test)]
    pub(crate) fn bump_weight(&mut self, layer: usize, i: usize, j: usize, delta: f64) {
        self.weights[layer][(i, j)] += delta;
    }

    /// Evaluate the network, retaining every layer's pre- and post-activation.
    pub fn forward(&self, x: &ArrayView1<f64>) -> Result<ForwardPass> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = Vec::with_capacity(self.depth());
        let mut y = x.to_owned();
        for (w, tau) in self.weights.iter().zip(self.shifts.iter()) {
            let z = w.t().dot(&y) + tau;
            y = z.mapv(|v| self.activation.g(v));
            pre.push(z);
            post.push(y.clone());
        }
        Ok(ForwardPass { pre, post })
    }

    /// Network outputs only.
    pub fn eval(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.outputs().clone())
    }

    /// Evaluate a batch of inputs (rows of `x`), returning one output row per
    /// input.
    pub fn eval_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut y = x.to_owned();
        for (w, tau) in self.weights.iter().zip(self.shifts.iter()) {
            let mut z = y.dot(w);
            z += &tau.view().insert_axis(Axis(0));
            z.mapv_inplace(|v| self.activation.g(v));
            y = z;
        }
        Ok(y)
    }

    /// Entangled weight matrices V_l(x) at a base point.
    pub fn entangled_weights(&self, x: &ArrayView1<f64>) -> Result<EntangledWeights> {
        let pass = self.forward(x)?;
        let mut mats: Vec<Array2<f64>> = Vec::with_capacity(self.depth());
        mats.push(self.weights[0].clone());
        for l in 1..self.depth() {
            // V_{l+1} = (V_l G_l) W_{l+1}: scale columns by g'(z_l), then chain.
            let g1 = pass.pre[l - 1].mapv(|v| self.activation.g1(v));
            let scaled = &mats[l - 1] * &g1.view().insert_axis(Axis(0));
            mats.push(scaled.dot(&self.weights[l]));
        }
        Ok(EntangledWeights {
            mats,
            base: x.to_owned(),
        })
    }

    /// Bit-exact JSON document; weights are flattened column-major per layer.
    pub fn to_json(&self) -> serde_json::Value {
        let widths = self.widths();
        let weights: Vec<Vec<f64>> = self
            .weights
            .iter()
            .map(|w| w.t().iter().copied().collect())
            .collect();
        let shifts: Vec<Vec<f64>> = self.shifts.iter().map(|s| s.to_vec()).collect();
        serde_json::json!({
            "widths": widths,
            "weights": weights,
            "shifts": shifts,
            "activation": self.activation,
            "seed": self.seed,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            widths: Vec<usize>,
            weights: Vec<Vec<f64>>,
            shifts: Vec<Vec<f64>>,
            activation: Activation,
            #[serde(default)]
            seed: Option<u64>,
        }
        let doc: Doc = serde_json::from_value(value.clone())?;
        if doc.widths.len() < 2 {
            return Err(Error::InvalidArchitecture(
                "widths must list the input dimension and at least one layer".into(),
            ));
        }
        let mut weights = Vec::new();
        let mut shifts = Vec::new();
        for l in 0..doc.widths.len() - 1 {
            let (rows, cols) = (doc.widths[l], doc.widths[l + 1]);
            let flat = &doc.weights[l];
            if flat.len() != rows * cols {
                return Err(Error::DimensionMismatch {
                    layer: l + 1,
                    expected: rows * cols,
                    got: flat.len(),
                });
            }
            // Stored column-major: entry (i, j) sits at j*rows + i.
            let w = Array2::from_shape_fn((rows, cols), |(i, j)| flat[j * rows + i]);
            weights.push(w);
            shifts.push(Array1::from_vec(doc.shifts[l].clone()));
        }
        let mut net = NetworkParams::new(weights, shifts, doc.activation)?;
        net.seed = doc.seed;
        Ok(net)
    }
}

/// Entangled weight matrices V_1(x), ..., V_L(x); each is D x m_l with the
/// entangled weight vectors as columns.
#[derive(Debug, Clone)]
pub struct EntangledWeights {
    pub mats: Vec<Array2<f64>>,
    pub base: Array1<f64>,
}

impl EntangledWeights {
    /// Length-normalized copies of all entangled weight vectors, stacked as
    /// the columns of one D x m matrix, layer by layer.
    pub fn normalized_columns(&self) -> Array2<f64> {
        let d = self.mats[0].nrows();
        let m: usize = self.mats.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::<f64>::zeros((d, m));
        let mut k = 0;
        for v in &self.mats {
            for col in v.columns() {
                let norm = col.dot(&col).sqrt();
                out.column_mut(k).assign(&(&col / norm));
                k += 1;
            }
        }
        out
    }

    /// Column counts per layer.
    pub fn layer_widths(&self) -> Vec<usize> {
        self.mats.iter().map(|v| v.ncols()).collect()
    }
}

/// Draw one point uniformly from the unit sphere in `dim` dimensions.
pub(crate) fn unit_sphere_sample<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    let mut v = Array1::<f64>::zeros(dim);
    loop {
        for x in v.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
            return v;
        }
    }
}

/// Rebuild a network from scaled/permuted entangled weight matrices.
///
/// `v_tilde[l]` must equal `(prod_{k<l} W_k D_k) W_l pi_l S_l` for invertible
/// diagonals `D_k` (typically G_k(x*)) and `S_l`, and permutations `pi_l`.
/// Permutations are given as index vectors `q` with `(V pi)[:, j] = V[:, q[j]]`.
/// The rebuilt network satisfies `f_tilde == pi_L^T f` exactly.
pub fn reparametrize(
    v_tilde: &[Array2<f64>],
    s_diags: &[Array1<f64>],
    d_diags: &[Array1<f64>],
    taus: &[Array1<f64>],
    perms: &[Vec<usize>],
    activation: Activation,
) -> Result<NetworkParams> {
    let depth = v_tilde.len();
    if depth == 0
        || s_diags.len() != depth
        || taus.len() != depth
        || perms.len() != depth
        || d_diags.len() + 1 != depth
    {
        return Err(Error::InvalidConfig(
            "reparametrize: inconsistent number of layers across inputs".into(),
        ));
    }
    for (l, s) in s_diags.iter().enumerate() {
        if s.iter().any(|v| *v == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "reparametrize: singular scale diagonal at layer {}",
                l + 1
            )));
        }
    }
    for (l, d) in d_diags.iter().enumerate() {
        if d.iter().any(|v| *v == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "reparametrize: singular diagonal D at layer {}",
                l + 1
            )));
        }
    }
    // Every recovered matrix must have full column rank, including the last.
    for (l, v) in v_tilde.iter().enumerate() {
        let ratio = linalg::min_max_singular_ratio(&v.view())?;
        if !(ratio > 1e-10) {
            return Err(Error::RankDeficient {
                name: format!("V_tilde[{}]", l + 1),
                ratio,
            });
        }
    }

    let mut weights = Vec::with_capacity(depth);
    let mut shifts = Vec::with_capacity(depth);
    // First layer: W_1 = V_1 S_1^{-1}.
    let w1 = &v_tilde[0] / &s_diags[0].view().insert_axis(Axis(0));
    weights.push(w1);
    shifts.push(apply_perm(&taus[0], &perms[0]));

    for l in 0..depth - 1 {
        let pinv_t = linalg::pinv_with_check(
            &v_tilde[l].t(),
            1e-12,
            1e-10,
            &format!("V_tilde[{}]", l + 1),
        )?;
        // W_{l+1}^T = S_{l+1}^{-1} V_{l+1}^T (V_l^T)^+ S_l D~_l^{-1}.
        let mut m = v_tilde[l + 1].t().dot(&pinv_t);
        let d_perm = apply_perm(&d_diags[l], &perms[l]);
        for (mut row, s_out) in m.rows_mut().into_iter().zip(s_diags[l + 1].iter()) {
            row /= *s_out;
        }
        for (mut col, (s_in, d_in)) in m
            .columns_mut()
            .into_iter()
            .zip(s_diags[l].iter().zip(d_perm.iter()))
        {
            col *= *s_in / *d_in;
        }
        weights.push(m.t().to_owned());
        shifts.push(apply_perm(&taus[l + 1], &perms[l + 1]));
    }
    NetworkParams::new(weights, shifts, activation)
}

pub(crate) fn apply_perm(v: &Array1<f64>, q: &[usize]) -> Array1<f64> {
    Array1::from_iter(q.iter().map(|&i| v[i]))
}

/// Permute the columns of a matrix: `out[:, j] = v[:, q[j]]`.
pub(crate) fn apply_perm_cols(v: &ArrayView2<f64>, q: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((v.nrows(), q.len()));
    for (j, &i) in q.iter().enumerate() {
        out.column_mut(j).assign(&v.column(i));
    }
    out
}

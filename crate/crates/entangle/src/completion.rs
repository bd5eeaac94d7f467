//! Network completion: with entangled weight matrices fixed, fit the
//! remaining shifts and diagonal scales by full-batch gradient descent on a
//! least squares objective. Also hosts the SGD baselines used for comparison.

use crate::derivatives::QueryOracle;
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{Activation, NetworkParams};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

/// Fixed data of the completion problem: recovered entangled weight matrices
/// (columns unit-norm up to sign), their chained pseudoinverse links, and the
/// output permutation found during assignment.
#[derive(Debug, Clone)]
pub struct CompletionProblem {
    v_mats: Vec<Array2<f64>>,
    /// links[l] = V_{l+1}^T (V_l^T)^+, shape (m_{l+1}, m_l).
    links: Vec<Array2<f64>>,
    /// Output permutation: the model approximates x -> f(x)[pi_l[j]] at slot j.
    pi_l: Vec<usize>,
    activation: Activation,
}

impl CompletionProblem {
    pub fn new(v_mats: Vec<Array2<f64>>, pi_l: Vec<usize>, activation: Activation) -> Result<Self> {
        if v_mats.is_empty() {
            return Err(Error::InvalidConfig("need at least one layer".into()));
        }
        let d = v_mats[0].nrows();
        let m_last = v_mats.last().unwrap().ncols();
        if pi_l.len() != m_last {
            return Err(Error::InvalidConfig(format!(
                "output permutation length {} does not match m_L = {m_last}",
                pi_l.len()
            )));
        }
        let mut sorted = pi_l.clone();
        sorted.sort_unstable();
        if sorted != (0..m_last).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig("pi_l is not a permutation".into()));
        }
        let mut prev = d;
        for (l, v) in v_mats.iter().enumerate() {
            if v.nrows() != d {
                return Err(Error::DimensionMismatch {
                    layer: l + 1,
                    expected: d,
                    got: v.nrows(),
                });
            }
            if v.ncols() > prev {
                return Err(Error::InvalidArchitecture(format!(
                    "completion requires a pyramidal network (layer {} widens {} -> {})",
                    l + 1,
                    prev,
                    v.ncols()
                )));
            }
            prev = v.ncols();
        }
        let mut links = Vec::with_capacity(v_mats.len().saturating_sub(1));
        for l in 0..v_mats.len() - 1 {
            let pinv_t = linalg::pinv_with_check(
                &v_mats[l].t(),
                1e-12,
                1e-10,
                &format!("V_tilde[{}]", l + 1),
            )?;
            links.push(v_mats[l + 1].t().dot(&pinv_t));
        }
        Ok(CompletionProblem {
            v_mats,
            links,
            pi_l,
            activation,
        })
    }

    pub fn depth(&self) -> usize {
        self.v_mats.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.v_mats.iter().map(|v| v.ncols()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.v_mats[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.v_mats.last().unwrap().ncols()
    }

    pub fn pi_l(&self) -> &[usize] {
        &self.pi_l
    }

    pub fn v_mats(&self) -> &[Array2<f64>] {
        &self.v_mats
    }

    /// Permute targets into the model's output order.
    pub fn permute_targets(&self, y: &ArrayView2<f64>) -> Array2<f64> {
        crate::net::apply_perm_cols(y, &self.pi_l)
    }

    /// Materialize the induced network for the given parameters.
    pub fn to_network(&self, params: &CompletionParams) -> Result<NetworkParams> {
        let depth = self.depth();
        let mut weights = Vec::with_capacity(depth);
        let mut shifts = Vec::with_capacity(depth);
        // First layer of the induced net: columns of V_1 scaled by T_1.
        weights.push(&self.v_mats[0] * &params.t_scales[0].view().insert_axis(Axis(0)));
        shifts.push(params.shifts[0].clone());
        for l in 0..depth - 1 {
            // (T_{l+1} P_l R_l)^T = R_l P_l^T T_{l+1} in storage convention.
            let mut w = self.links[l].t().to_owned();
            for (mut row, r) in w.rows_mut().into_iter().zip(params.r_scales[l].iter()) {
                row *= *r;
            }
            for (mut col, t) in w
                .columns_mut()
                .into_iter()
                .zip(params.t_scales[l + 1].iter())
            {
                col *= *t;
            }
            weights.push(w);
            shifts.push(params.shifts[l + 1].clone());
        }
        NetworkParams::new(weights, shifts, self.activation)
    }
}

/// The free parameters: per-layer shifts, diagonal output scales T_l, and
/// diagonal inter-layer scales R_l for l < L.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionParams {
    pub shifts: Vec<Array1<f64>>,
    pub t_scales: Vec<Array1<f64>>,
    pub r_scales: Vec<Array1<f64>>,
}

impl CompletionParams {
    /// Shifts zero, all diagonals identity.
    pub fn identity_init(widths: &[usize]) -> Self {
        let depth = widths.len();
        CompletionParams {
            shifts: widths.iter().map(|&m| Array1::zeros(m)).collect(),
            t_scales: widths.iter().map(|&m| Array1::ones(m)).collect(),
            r_scales: widths[..depth - 1].iter().map(|&m| Array1::ones(m)).collect(),
        }
    }

    /// Number of free parameters: 2 sum_l m_l + sum_{l<L} m_l.
    pub fn dim(&self) -> usize {
        let m: usize = self.shifts.iter().map(|s| s.len()).sum();
        let r: usize = self.r_scales.iter().map(|s| s.len()).sum();
        2 * m + r
    }

    fn zeros_like(&self) -> Self {
        CompletionParams {
            shifts: self.shifts.iter().map(|s| Array1::zeros(s.len())).collect(),
            t_scales: self.t_scales.iter().map(|s| Array1::zeros(s.len())).collect(),
            r_scales: self.r_scales.iter().map(|s| Array1::zeros(s.len())).collect(),
        }
    }

    fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.shifts.iter_mut().zip(other.shifts.iter()) {
            a.zip_mut_with(b, |x, &y| *x += alpha * y);
        }
        for (a, b) in self.t_scales.iter_mut().zip(other.t_scales.iter()) {
            a.zip_mut_with(b, |x, &y| *x += alpha * y);
        }
        for (a, b) in self.r_scales.iter_mut().zip(other.r_scales.iter()) {
            a.zip_mut_with(b, |x, &y| *x += alpha * y);
        }
    }

    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for s in &self.shifts {
            out.extend(s.iter());
        }
        for s in &self.t_scales {
            out.extend(s.iter());
        }
        for s in &self.r_scales {
            out.extend(s.iter());
        }
        Array1::from_vec(out)
    }

    pub fn assign_flat(&mut self, flat: &Array1<f64>) {
        let mut k = 0;
        for s in self
            .shifts
            .iter_mut()
            .chain(self.t_scales.iter_mut())
            .chain(self.r_scales.iter_mut())
        {
            for v in s.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        assert_eq!(k, flat.len());
    }
}

struct CompletionPass {
    /// a_l: the linear input of layer l before the T scaling and shift.
    lin: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

fn forward_pass(
    problem: &CompletionProblem,
    params: &CompletionParams,
    x: &ArrayView2<f64>,
) -> CompletionPass {
    let depth = problem.depth();
    let mut lin = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut post = Vec::with_capacity(depth);
    let g = problem.activation;
    for l in 0..depth {
        let a = if l == 0 {
            x.dot(&problem.v_mats[0])
        } else {
            let scaled: Array2<f64> =
                &post[l - 1] * &params.r_scales[l - 1].view().insert_axis(Axis(0));
            scaled.dot(&problem.links[l - 1].t())
        };
        let mut z = &a * &params.t_scales[l].view().insert_axis(Axis(0));
        z += &params.shifts[l].view().insert_axis(Axis(0));
        let y = z.mapv(|v| g.g(v));
        lin.push(a);
        pre.push(z);
        post.push(y);
    }
    CompletionPass { lin, pre, post }
}

/// Evaluate the induced network on a batch of inputs (rows).
pub fn completed_forward_batch(
    problem: &CompletionProblem,
    params: &CompletionParams,
    x: &ArrayView2<f64>,
) -> Array2<f64> {
    forward_pass(problem, params, x).post.pop().unwrap()
}

/// Evaluate at a single point.
pub fn completed_forward(
    problem: &CompletionProblem,
    params: &CompletionParams,
    x: &ndarray::ArrayView1<f64>,
) -> Array1<f64> {
    let xm = x.to_owned().insert_axis(Axis(0));
    completed_forward_batch(problem, params, &xm.view())
        .row(0)
        .to_owned()
}

/// Training data for the completion fit.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl TrainSet {
    /// X_i ~ N(0, (1/D) Id), Y_i = f(X_i) from the query oracle.
    pub fn sample<O: QueryOracle + ?Sized, R: Rng>(oracle: &O, n: usize, rng: &mut R) -> Self {
        let d = oracle.input_dim();
        let sigma = 1.0 / (d as f64).sqrt();
        let mut x = Array2::<f64>::zeros((n, d));
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = sigma * z;
        }
        let y = oracle.eval_batch(&x.view());
        TrainSet { x, y }
    }
}

/// J(omega) = sum_i || pi_L^T Y_i - f_hat(X_i) ||^2.
pub fn completion_loss(
    problem: &CompletionProblem,
    params: &CompletionParams,
    data: &TrainSet,
) -> f64 {
    let pred = completed_forward_batch(problem, params, &data.x.view());
    let target = problem.permute_targets(&data.y.view());
    (&pred - &target).mapv(|v| v * v).sum()
}

/// Analytic gradient of the loss with respect to every shift and diagonal
/// entry (the entangled weight matrices and their pseudoinverses are treated
/// as constants of the parametrization).
pub fn completion_grad(
    problem: &CompletionProblem,
    params: &CompletionParams,
    data: &TrainSet,
) -> (f64, CompletionParams) {
    let depth = problem.depth();
    let g = problem.activation;
    let pass = forward_pass(problem, params, &data.x.view());
    let target = problem.permute_targets(&data.y.view());
    let resid = &pass.post[depth - 1] - &target;
    let loss = resid.mapv(|v| v * v).sum();

    let mut grads = params.zeros_like();
    // delta_l = dJ/dz_l, starting at the output layer.
    let mut delta = 2.0 * &resid * &pass.pre[depth - 1].mapv(|z| g.g1(z));
    for l in (0..depth).rev() {
        grads.shifts[l] = delta.sum_axis(Axis(0));
        grads.t_scales[l] = (&delta * &pass.lin[l]).sum_axis(Axis(0));
        if l > 0 {
            // w = dJ/d(R_{l-1} .* y_{l-1}) = (delta .* T_l) P_{l-1}.
            let scaled: Array2<f64> = &delta * &params.t_scales[l].view().insert_axis(Axis(0));
            let w = scaled.dot(&problem.links[l - 1]);
            grads.r_scales[l - 1] = (&w * &pass.post[l - 1]).sum_axis(Axis(0));
            let dy = &w * &params.r_scales[l - 1].view().insert_axis(Axis(0));
            delta = dy * &pass.pre[l - 1].mapv(|z| g.g1(z));
        }
    }
    (loss, grads)
}

/// Gradient descent configuration. Defaults: learning rate 0.025 on the
/// mean-scaled gradient, budget of 5e4 full-batch steps, stop once the loss
/// falls below 1e-14 * N_f or stalls at machine precision.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Record a history row (and invoke the probe) every this many steps.
    pub eval_every: usize,
    pub loss_floor_per_sample: f64,
    /// Stop when the relative loss improvement over `stall_window` steps
    /// drops below this.
    pub stall_rel: f64,
    pub stall_window: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 0.025,
            max_steps: 50_000,
            eval_every: 250,
            loss_floor_per_sample: 1e-14,
            stall_rel: 1e-12,
            stall_window: 500,
        }
    }
}

/// One recorded point of the optimization trajectory.
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub probe: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FitHistory {
    pub rows: Vec<HistoryRow>,
    pub steps_run: usize,
    /// Fraction of steps on which the loss did not increase (1e-12 slack).
    pub monotone_fraction: f64,
}

impl FitHistory {
    pub fn export_csv<W: Write>(&self, probe_names: &[String], mut w: W) -> Result<()> {
        writeln!(w, "step,loss,{}", probe_names.join(","))?;
        for row in &self.rows {
            let probes: Vec<String> = row.probe.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{},{}", row.step, row.loss, probes.join(","))?;
        }
        Ok(())
    }
}

/// Full-batch gradient descent from the identity initialization.
///
/// `probe` is called at every recorded step to compute extra metrics
/// (test errors, shift errors); its outputs land in the history rows.
pub fn fit<F>(
    problem: &CompletionProblem,
    data: &TrainSet,
    cfg: &FitConfig,
    mut probe: F,
) -> Result<(CompletionParams, FitHistory)>
where
    F: FnMut(usize, &CompletionParams) -> Vec<f64>,
{
    let n = data.x.nrows() as f64;
    let mut params = CompletionParams::identity_init(&problem.widths());
    let mut history = FitHistory::default();
    let mut prev_loss = f64::INFINITY;
    let mut window_start_loss = f64::INFINITY;
    let mut initial_loss = f64::INFINITY;
    let mut non_increasing = 0usize;
    let mut steps = 0usize;
    let floor = cfg.loss_floor_per_sample * n;
    for step in 0..cfg.max_steps {
        let (loss, grads) = completion_grad(problem, &params, data);
        if step == 0 {
            initial_loss = loss;
        }
        // Bounded activations keep the loss finite even when the step size is
        // far too large, so explosion past the initial loss also counts.
        if !loss.is_finite() || loss > 25.0 * initial_loss + 1e-9 {
            return Err(Error::Diverged);
        }
        if loss <= prev_loss + 1e-12 {
            non_increasing += 1;
        }
        if step % cfg.eval_every == 0 {
            history.rows.push(HistoryRow {
                step,
                loss,
                probe: probe(step, &params),
            });
        }
        if loss <= floor {
            steps = step;
            break;
        }
        if step % cfg.stall_window == 0 {
            if step > 0 {
                let improved = (window_start_loss - loss).max(0.0);
                if improved <= cfg.stall_rel * window_start_loss.max(f64::MIN_POSITIVE) {
                    steps = step;
                    break;
                }
            }
            window_start_loss = loss;
        }
        params.axpy(-cfg.lr / n, &grads);
        prev_loss = loss;
        steps = step + 1;
    }
    let final_loss = completion_loss(problem, &params, data);
    if !final_loss.is_finite() {
        return Err(Error::Diverged);
    }
    history.rows.push(HistoryRow {
        step: steps,
        loss: final_loss,
        probe: probe(steps, &params),
    });
    history.steps_run = steps;
    history.monotone_fraction = if steps == 0 {
        1.0
    } else {
        non_increasing as f64 / (steps as f64)
    };
    Ok((params, history))
}

/// Relative mean squared error: sum ||pred - truth||^2 / sum ||truth||^2.
pub fn relative_mse(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> f64 {
    let num = (&pred.to_owned() - &truth.to_owned()).mapv(|v| v * v).sum();
    let den = truth.mapv(|v| v * v).sum();
    num / den
}

/// Relative sup error: max |pred - truth| / max |truth| over all entries.
pub fn relative_sup_error(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> f64 {
    let num = (&pred.to_owned() - &truth.to_owned())
        .mapv(f64::abs)
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    let den = truth.mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    num / den
}

/// The loss-free parameter choice induced by exact entangled weights
/// V_tilde_l = V_l(x*) pi_l S_l: T_l = S_l^{-1}, R_l = S_l pi_l^T
/// G_l(x*)^{-1} pi_l, tau_hat_l = pi_l^T tau_l.
pub fn exact_parameters(
    teacher: &NetworkParams,
    base_point: &ndarray::ArrayView1<f64>,
    signs: &[Array1<f64>],
    perms: &[Vec<usize>],
) -> Result<CompletionParams> {
    let pass = teacher.forward(base_point)?;
    let depth = teacher.depth();
    let mut shifts = Vec::with_capacity(depth);
    let mut t_scales = Vec::with_capacity(depth);
    let mut r_scales = Vec::with_capacity(depth - 1);
    for l in 0..depth {
        let q = &perms[l];
        shifts.push(crate::net::apply_perm(teacher.shift(l), q));
        t_scales.push(signs[l].mapv(|s| 1.0 / s));
        if l < depth - 1 {
            let g1 = pass.pre[l].mapv(|z| teacher.activation().g1(z));
            let g1_perm = crate::net::apply_perm(&g1, q);
            let r = Array1::from_iter(signs[l].iter().zip(g1_perm.iter()).map(|(&s, &g)| s / g));
            r_scales.push(r);
        }
    }
    Ok(CompletionParams {
        shifts,
        t_scales,
        r_scales,
    })
}

/// Initialization flavor for the SGD baselines.
pub enum BaselineInit<'a> {
    /// Fresh random weights (matching the teacher's sampling scheme).
    Random { seed: u64 },
    /// Weight matrices assembled from recovered entangled weights:
    /// W_1 = V_1, W_{l+1} = V_l^+ V_{l+1}.
    Entangled { v_mats: &'a [Array2<f64>] },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            batch_size: 10_000,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Minibatch SGD on the standard least squares objective over all weights and
/// shifts of a network with the given widths. `probe` runs after each epoch.
pub fn sgd_baseline<F>(
    input_dim: usize,
    widths: &[usize],
    activation: Activation,
    init: BaselineInit<'_>,
    data: &TrainSet,
    cfg: &SgdConfig,
    mut probe: F,
) -> Result<NetworkParams>
where
    F: FnMut(usize, &NetworkParams),
{
    let mut net = match init {
        BaselineInit::Random { seed } => {
            let mut rng = crate::stage_rng(seed, "baseline-init");
            NetworkParams::sample(input_dim, widths, activation, &mut rng)?
        }
        BaselineInit::Entangled { v_mats } => {
            let mut weights: Vec<Array2<f64>> = Vec::with_capacity(v_mats.len());
            weights.push(v_mats[0].clone());
            for l in 0..v_mats.len() - 1 {
                let pinv = linalg::pinv(&v_mats[l].view(), 1e-12)?;
                weights.push(pinv.dot(&v_mats[l + 1]));
            }
            let shifts = widths.iter().map(|&m| Array1::zeros(m)).collect();
            NetworkParams::new(weights, shifts, activation)?
        }
    };

    let n = data.x.nrows();
    let mut rng = crate::stage_rng(cfg.seed, "baseline-sgd");
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = data.x.select(Axis(0), chunk);
            let yb = data.y.select(Axis(0), chunk);
            sgd_step(&mut net, &xb, &yb, cfg.lr)?;
        }
        probe(epoch, &net);
    }
    Ok(net)
}

/// One SGD step on the mean squared error of a minibatch.
fn sgd_step(net: &mut NetworkParams, x: &Array2<f64>, y: &Array2<f64>, lr: f64) -> Result<()> {
    let depth = net.depth();
    let g = net.activation();
    let scale = 1.0 / x.nrows() as f64;
    let mut pre = Vec::with_capacity(depth);
    let mut post = Vec::with_capacity(depth);
    for l in 0..depth {
        let input = if l == 0 { x } else { &post[l - 1] };
        let mut z = input.dot(net.weight(l));
        z += &net.shift(l).view().insert_axis(Axis(0));
        let a = z.mapv(|v| g.g(v));
        pre.push(z);
        post.push(a);
    }
    let resid = &post[depth - 1] - y;
    if resid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged);
    }
    let mut delta = 2.0 * &resid * &pre[depth - 1].mapv(|z| g.g1(z));
    let mut w_grads: Vec<Array2<f64>> = Vec::with_capacity(depth);
    let mut s_grads: Vec<Array1<f64>> = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let input = if l == 0 { x } else { &post[l - 1] };
        w_grads.push(input.t().dot(&delta) * scale);
        s_grads.push(delta.sum_axis(Axis(0)) * scale);
        if l > 0 {
            let back = delta.dot(&net.weight(l).t());
            delta = back * &pre[l - 1].mapv(|z| g.g1(z));
        }
    }
    w_grads.reverse();
    s_grads.reverse();
    net.apply_gradient_step(&w_grads, &s_grads, lr);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetworkParams};
    use ndarray::array;

    fn pyramidal_teacher(seed: u64, d: usize, widths: &[usize]) -> NetworkParams {
        let mut rng = crate::stage_rng(seed, "completion-test");
        NetworkParams::sample(d, widths, Activation::Tanh, &mut rng).unwrap()
    }

    fn exact_problem(
        teacher: &NetworkParams,
        signs: &[Array1<f64>],
        perms: &[Vec<usize>],
    ) -> (CompletionProblem, CompletionParams) {
        let x0 = Array1::zeros(teacher.input_dim());
        let ew = teacher.entangled_weights(&x0.view()).unwrap();
        let v_mats: Vec<Array2<f64>> = ew
            .mats
            .iter()
            .zip(perms.iter().zip(signs.iter()))
            .map(|(v, (q, s))| {
                let permuted = crate::net::apply_perm_cols(&v.view(), q);
                &permuted * &s.view().insert_axis(Axis(0))
            })
            .collect();
        let pi_l = perms.last().unwrap().clone();
        let problem = CompletionProblem::new(v_mats, pi_l, teacher.activation()).unwrap();
        let params = exact_parameters(teacher, &x0.view(), signs, perms).unwrap();
        (problem, params)
    }

    #[test]
    fn exact_parameters_reproduce_permuted_teacher() {
        let teacher = pyramidal_teacher(1, 8, &[5, 4, 2]);
        let signs = vec![
            array![1.0, -1.0, 1.0, 1.0, -1.0] * 0.7,
            array![-1.3, 1.1, 0.9, -0.8],
            array![1.9, -0.4],
        ];
        let perms = vec![vec![2, 0, 4, 1, 3], vec![1, 3, 0, 2], vec![1, 0]];
        let (problem, params) = exact_problem(&teacher, &signs, &perms);
        let mut rng = crate::stage_rng(5, "completion-test");
        for _ in 0..20 {
            let x = Array1::from_iter((0..8).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (8f64).sqrt()
            }));
            let out = completed_forward(&problem, &params, &x.view());
            let truth = teacher.eval(&x.view()).unwrap();
            for (j, &q) in problem.pi_l().iter().enumerate() {
                assert!(
                    (out[j] - truth[q]).abs() <= 1e-9,
                    "slot {j}: {} vs {}",
                    out[j],
                    truth[q]
                );
            }
        }
    }

    #[test]
    fn exact_parameters_reach_machine_zero_loss() {
        let teacher = pyramidal_teacher(2, 10, &[6, 3]);
        let signs = vec![Array1::ones(6), Array1::ones(3)];
        let perms = vec![(0..6).collect::<Vec<_>>(), (0..3).collect::<Vec<_>>()];
        let (problem, params) = exact_problem(&teacher, &signs, &perms);
        let mut rng = crate::stage_rng(7, "completion-test");
        let data = TrainSet::sample(&teacher, 200, &mut rng);
        let loss = completion_loss(&problem, &params, &data);
        assert!(loss <= 1e-12 * 200.0, "loss {loss}");
        let pred = completed_forward_batch(&problem, &params, &data.x.view());
        let target = problem.permute_targets(&data.y.view());
        let worst = (&pred - &target)
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(worst * worst <= 1e-12, "worst residual {worst}");
    }

    #[test]
    fn trivial_single_layer_identity_params() {
        let teacher = pyramidal_teacher(3, 5, &[3]);
        let v1 = teacher.weight(0).clone();
        let problem = CompletionProblem::new(vec![v1], vec![0, 1, 2], Activation::Tanh).unwrap();
        let mut params = CompletionParams::identity_init(&problem.widths());
        params.shifts[0] = teacher.shift(0).clone();
        let x = array![0.2, -0.4, 0.1, 0.3, -0.2];
        let out = completed_forward(&problem, &params, &x.view());
        let truth = teacher.eval(&x.view()).unwrap();
        for (a, b) in out.iter().zip(truth.iter()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn parameter_count_formula() {
        let params = CompletionParams::identity_init(&[5, 4, 2]);
        assert_eq!(params.dim(), 2 * (5 + 4 + 2) + (5 + 4));
        let flat = params.flatten();
        assert_eq!(flat.len(), params.dim());
    }

    #[test]
    fn perturbing_one_diagonal_entry_is_local() {
        let teacher = pyramidal_teacher(4, 6, &[4, 3]);
        let x0 = Array1::zeros(6);
        let ew = teacher.entangled_weights(&x0.view()).unwrap();
        let problem =
            CompletionProblem::new(ew.mats.clone(), vec![0, 1, 2], Activation::Tanh).unwrap();
        let params = CompletionParams::identity_init(&problem.widths());
        let x = array![0.1, 0.2, -0.3, 0.05, 0.0, -0.15];
        let xm = x.to_owned().insert_axis(Axis(0));
        let base = forward_pass(&problem, &params, &xm.view());
        let mut bumped = params.clone();
        bumped.t_scales[0][2] += 0.1;
        let after = forward_pass(&problem, &bumped, &xm.view());
        for j in 0..4 {
            let changed = (base.pre[0][(0, j)] - after.pre[0][(0, j)]).abs() > 1e-15;
            assert_eq!(changed, j == 2, "neuron {j}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let teacher = pyramidal_teacher(5, 6, &[4, 3, 2]);
        let x0 = Array1::zeros(6);
        let ew = teacher.entangled_weights(&x0.view()).unwrap();
        let problem =
            CompletionProblem::new(ew.mats.clone(), vec![1, 0], Activation::Tanh).unwrap();
        let mut rng = crate::stage_rng(11, "completion-test");
        let data = TrainSet::sample(&teacher, 40, &mut rng);
        let mut params = CompletionParams::identity_init(&problem.widths());
        // Move off the symmetric point so every gradient entry is generic.
        for s in params.shifts.iter_mut() {
            for v in s.iter_mut() {
                *v += 0.05 * (rng.random::<f64>() - 0.5);
            }
        }
        for s in params.t_scales.iter_mut().chain(params.r_scales.iter_mut()) {
            for v in s.iter_mut() {
                *v += 0.2 * (rng.random::<f64>() - 0.5);
            }
        }
        let (_, grads) = completion_grad(&problem, &params, &data);
        let flat = params.flatten();
        let gflat = grads.flatten();
        let h = 1e-6;
        for k in (0..flat.len()).step_by(3) {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[k] += h;
            fm[k] -= h;
            plus.assign_flat(&fp);
            minus.assign_flat(&fm);
            let fd = (completion_loss(&problem, &plus, &data)
                - completion_loss(&problem, &minus, &data))
                / (2.0 * h);
            let rel = (fd - gflat[k]).abs() / gflat[k].abs().max(1e-6);
            assert!(rel <= 1e-5, "param {k}: fd {fd} vs grad {}", gflat[k]);
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_solution() {
        let teacher = pyramidal_teacher(6, 8, &[5, 3]);
        let signs = vec![Array1::ones(5), Array1::ones(3)];
        let perms = vec![(0..5).collect::<Vec<_>>(), (0..3).collect::<Vec<_>>()];
        let (problem, params) = exact_problem(&teacher, &signs, &perms);
        let mut rng = crate::stage_rng(13, "completion-test");
        let data = TrainSet::sample(&teacher, 100, &mut rng);
        let (loss, grads) = completion_grad(&problem, &params, &data);
        let gnorm = grads.flatten().mapv(|v| v * v).sum().sqrt();
        assert!(loss <= 1e-20 * 100.0);
        assert!(gnorm <= 1e-7, "gradient norm {gnorm}");
    }

    #[test]
    fn shift_gradient_hand_formula_single_neuron() {
        // One layer, one neuron: dJ/dtau = sum_i 2 (g(z_i) - y_i) g'(z_i).
        let v = array![[1.0], [0.5]];
        let problem = CompletionProblem::new(vec![v], vec![0], Activation::Tanh).unwrap();
        let mut params = CompletionParams::identity_init(&[1]);
        params.shifts[0][0] = 0.3;
        let data = TrainSet {
            x: array![[0.2, -0.1], [0.5, 0.4], [-0.3, 0.2]],
            y: array![[0.1], [-0.2], [0.4]],
        };
        let (_, grads) = completion_grad(&problem, &params, &data);
        let mut want = 0.0;
        for i in 0..3 {
            let z = data.x[(i, 0)] + 0.5 * data.x[(i, 1)] + 0.3;
            want += 2.0 * (z.tanh() - data.y[(i, 0)]) * (1.0 - z.tanh() * z.tanh());
        }
        assert!((grads.shifts[0][0] - want).abs() <= 1e-12);
    }

    #[test]
    fn loss_trivials() {
        let v = array![[1.0], [0.0]];
        let problem = CompletionProblem::new(vec![v], vec![0], Activation::Tanh).unwrap();
        let params = CompletionParams::identity_init(&[1]);
        let zero_data = TrainSet {
            x: Array2::zeros((4, 2)),
            y: Array2::zeros((4, 1)),
        };
        assert_eq!(completion_loss(&problem, &params, &zero_data), 0.0);
        let mut rng = crate::stage_rng(17, "completion-test");
        let data = TrainSet {
            x: Array2::from_shape_fn((5, 2), |_| rng.random::<f64>() - 0.5),
            y: Array2::from_shape_fn((5, 1), |_| rng.random::<f64>() - 0.5),
        };
        assert!(completion_loss(&problem, &params, &data) >= 0.0);
    }

    #[test]
    fn fit_diverges_with_huge_learning_rate() {
        let teacher = pyramidal_teacher(7, 6, &[4, 2]);
        let x0 = Array1::zeros(6);
        let ew = teacher.entangled_weights(&x0.view()).unwrap();
        let problem = CompletionProblem::new(ew.mats, vec![0, 1], Activation::Tanh).unwrap();
        let mut rng = crate::stage_rng(19, "completion-test");
        let data = TrainSet::sample(&teacher, 100, &mut rng);
        let cfg = FitConfig {
            lr: 1e7,
            max_steps: 400,
            ..FitConfig::default()
        };
        let out = fit(&problem, &data, &cfg, |_, _| Vec::new());
        assert!(matches!(out, Err(Error::Diverged)), "{out:?}");
    }

    #[test]
    fn metrics_on_hand_built_cases() {
        let truth = array![[1.0, 0.0], [0.0, 2.0]];
        let pred = array![[1.5, 0.0], [0.0, 2.0]];
        assert!((relative_mse(&pred.view(), &truth.view()) - 0.25 / 5.0).abs() <= 1e-15);
        assert!((relative_sup_error(&pred.view(), &truth.view()) - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn sgd_backprop_matches_finite_differences() {
        let teacher = pyramidal_teacher(8, 5, &[4, 2]);
        let mut rng = crate::stage_rng(23, "completion-test");
        let data = TrainSet::sample(&teacher, 30, &mut rng);
        let base = NetworkParams::sample(5, &[4, 2], Activation::Tanh, &mut rng).unwrap();
        let loss = |n: &NetworkParams| -> f64 {
            let pred = n.eval_batch(&data.x.view()).unwrap();
            (&pred - &data.y).mapv(|v| v * v).sum() / data.x.nrows() as f64
        };
        let h = 1e-6;
        let lr = 0.37;
        let mut stepped = base.clone();
        sgd_step(&mut stepped, &data.x, &data.y, lr).unwrap();
        for (l, i, j) in [(0usize, 1usize, 2usize), (1usize, 3usize, 0usize)] {
            let mut np = base.clone();
            np.bump_weight(l, i, j, h);
            let mut nm = base.clone();
            nm.bump_weight(l, i, j, -h);
            let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
            let applied = (base.weight(l)[(i, j)] - stepped.weight(l)[(i, j)]) / lr;
            let rel = (fd - applied).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-5, "layer {l} ({i},{j}): fd {fd} vs applied {applied}");
        }
    }

    #[test]
    fn entangled_init_shapes() {
        let teacher = pyramidal_teacher(9, 7, &[5, 4, 2]);
        let x0 = Array1::zeros(7);
        let ew = teacher.entangled_weights(&x0.view()).unwrap();
        let mut rng = crate::stage_rng(29, "completion-test");
        let data = TrainSet::sample(&teacher, 50, &mut rng);
        let cfg = SgdConfig {
            epochs: 1,
            batch_size: 25,
            ..SgdConfig::default()
        };
        let net = sgd_baseline(
            7,
            &[5, 4, 2],
            Activation::Tanh,
            BaselineInit::Entangled { v_mats: &ew.mats },
            &data,
            &cfg,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(net.widths(), vec![7, 5, 4, 2]);
    }
}

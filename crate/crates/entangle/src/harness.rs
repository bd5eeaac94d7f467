//! Pipeline orchestration: configs, full runs, evaluation metrics against the
//! teacher, the reference experiments, and report emission.

use crate::assignment::{self, AssignmentResult, KmeansConfig};
use crate::completion::{self, CompletionParams, CompletionProblem, FitConfig, FitHistory, TrainSet};
use crate::context::{self, SubspaceProjector};
use crate::derivatives::{fd_query_count, CountingOracle, HessianBatch, SamplingLaw};
use crate::error::{Error, Result};
use crate::net::{Activation, Architecture, NetworkParams};
use crate::power::{self, CandidateSet, RecoveryConfig};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HessianMode {
    Analytic,
    Fd,
}

/// Full pipeline configuration. Defaults are the reference full-scale values;
/// [`PipelineConfig::desk`] shrinks the expensive knobs for interactive runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub arch: Architecture,
    pub seed: u64,
    pub hessian_mode: HessianMode,
    /// Finite-difference step.
    pub eps: f64,
    /// Radius of the uniform-sphere law for the context stage.
    pub radius: f64,
    /// Number of Hessian locations; `None` uses `n_h_multiplier * ceil(m/m_L)`.
    pub n_h: Option<usize>,
    pub n_h_multiplier: usize,
    /// Number of power-method restarts; `None` uses the full-scale default.
    pub n_restarts: Option<usize>,
    pub power_steps: usize,
    pub gamma: f64,
    pub power_tol: f64,
    pub min_phi: f64,
    pub coarse_f32: bool,
    pub kmeans: KmeansConfig,
    /// First-layer detector law radius = factor * sqrt(D).
    pub first_layer_radius_factor: f64,
    pub first_layer_hessians: usize,
    pub completion_lr: f64,
    pub n_f: usize,
    pub completion_steps: usize,
    pub completion_eval_every: usize,
    pub n_test: usize,
    /// Assign layers from teacher knowledge; required when depth > 3.
    pub oracle_assignment: bool,
    pub run_assignment: bool,
    pub run_completion: bool,
}

impl PipelineConfig {
    /// Reference values: R = 0.01, eps = 1e-3, gamma = 1.5, K = 15000,
    /// n = 10000 restarts, 400 detector Hessians at radius 20 sqrt(D),
    /// lr = 0.025, N_f = 10^4.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        PipelineConfig {
            arch,
            seed,
            hessian_mode: HessianMode::Fd,
            eps: 1e-3,
            radius: 0.01,
            n_h: None,
            n_h_multiplier: 20,
            n_restarts: None,
            power_steps: 15_000,
            gamma: 1.5,
            power_tol: 1e-10,
            min_phi: 0.5,
            coarse_f32: false,
            kmeans: KmeansConfig::default(),
            first_layer_radius_factor: 20.0,
            first_layer_hessians: 400,
            completion_lr: 0.025,
            n_f: 10_000,
            completion_steps: 50_000,
            completion_eval_every: 500,
            n_test: 100_000,
            oracle_assignment: false,
            run_assignment: true,
            run_completion: true,
        }
    }

    /// Desk-scale profile: restarts scale with the coupon-collector count,
    /// the iteration cap drops to 3000 with a 1e-7 displacement tolerance and
    /// an f32 coarse phase, and fewer Hessian locations are sampled.
    pub fn desk(arch: Architecture, seed: u64) -> Self {
        let mut cfg = Self::new(arch, seed);
        let m = arch.total_neurons as f64;
        cfg.n_restarts = Some((m * (m.ln() + 4.0)).ceil().max(2000.0) as usize);
        cfg.power_steps = 3000;
        cfg.power_tol = 1e-7;
        cfg.coarse_f32 = true;
        cfg.n_h_multiplier = 3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.layer_widths()?;
        if !(self.radius > 0.0) || !(self.eps > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(
                "radius, eps and gamma must be positive".into(),
            ));
        }
        if self.arch.total_neurons == 0 {
            return Err(Error::InvalidConfig("total_neurons must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_n_h(&self) -> usize {
        self.n_h.unwrap_or_else(|| {
            self.n_h_multiplier * self.arch.total_neurons.div_ceil(self.arch.output_dim)
        })
    }

    pub fn resolved_restarts(&self) -> usize {
        self.n_restarts.unwrap_or(10_000)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub context_s: f64,
    pub recovery_s: f64,
    pub assignment_s: f64,
    pub completion_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionReport {
    pub mse: f64,
    pub e_inf: f64,
    /// Relative shift errors per layer.
    pub e_theta: Vec<f64>,
    pub final_loss: f64,
    pub steps_run: usize,
    pub monotone_fraction: f64,
}

/// End-to-end run summary; all teacher-referenced metrics live here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub subspace_distance: f64,
    pub singular_gap: f64,
    pub recov: f64,
    pub false_pos: f64,
    pub accepted_candidates: usize,
    pub total_candidates: usize,
    /// Hungarian-matched worst center error (strict bijective diagnostic).
    pub center_matching_error: Option<f64>,
    pub e1: Option<f64>,
    pub e_l: Option<f64>,
    pub completion: Option<CompletionReport>,
    pub query_count: u64,
    pub hessian_count: usize,
    pub timings: StageTimings,
}

impl RecoveryReport {
    /// Copy with timings zeroed, for bit-for-bit determinism comparisons.
    pub fn deterministic_view(&self) -> RecoveryReport {
        let mut copy = self.clone();
        copy.timings = StageTimings::default();
        copy
    }
}

/// Everything a run produced, for export or further analysis.
pub struct PipelineArtifacts {
    pub teacher: NetworkParams,
    /// Normalized true entangled weights, one layer per matrix (D x m_l).
    pub truth_layers: Vec<Array2<f64>>,
    pub projector: SubspaceProjector,
    pub candidates: CandidateSet,
    pub assignment: Option<AssignmentResult>,
    pub completion: Option<(CompletionProblem, CompletionParams, FitHistory)>,
}

/// Fraction of true weights covered by a 0.05-ball around some +-candidate.
pub fn recovery_rate(candidates: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> f64 {
    ball_coverage(candidates, truth, 0.05)
}

/// Fraction of candidates not within 0.05 of any +-true weight.
pub fn false_positive_rate(candidates: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> f64 {
    if candidates.nrows() == 0 {
        return 0.0;
    }
    let mut misses = 0usize;
    for cand in candidates.rows() {
        let mut hit = false;
        for t in truth.columns() {
            if signed_distance(&cand.to_owned(), &t.to_owned()) <= 0.05 {
                hit = true;
                break;
            }
        }
        if !hit {
            misses += 1;
        }
    }
    misses as f64 / candidates.nrows() as f64
}

fn ball_coverage(candidates: &ArrayView2<f64>, truth: &ArrayView2<f64>, radius: f64) -> f64 {
    if truth.ncols() == 0 {
        return 1.0;
    }
    let mut covered = 0usize;
    for t in truth.columns() {
        let t = t.to_owned();
        let hit = candidates
            .rows()
            .into_iter()
            .any(|c| signed_distance(&c.to_owned(), &t) <= radius);
        if hit {
            covered += 1;
        }
    }
    covered as f64 / truth.ncols() as f64
}

fn signed_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let plus = (a - b).mapv(|v| v * v).sum().sqrt();
    let minus = (a + b).mapv(|v| v * v).sum().sqrt();
    plus.min(minus)
}

/// Hungarian algorithm (shortest augmenting path with potentials) on a square
/// cost matrix; returns the column assigned to each row.
pub(crate) fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row assigned to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Bijectively match candidate rows to truth columns (with sign freedom) and
/// return the worst matched distance. Requires equal counts.
pub fn hungarian_matching_error(candidates: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> f64 {
    let n = candidates.nrows();
    if n != truth.ncols() || n == 0 {
        return f64::NAN;
    }
    let mut cost = Array2::<f64>::zeros((n, n));
    for (i, c) in candidates.rows().into_iter().enumerate() {
        let c = c.to_owned();
        for (j, t) in truth.columns().into_iter().enumerate() {
            cost[(i, j)] = signed_distance(&c, &t.to_owned());
        }
    }
    let assign = hungarian(&cost);
    (0..n).map(|i| cost[(i, assign[i])]).fold(0.0, f64::max)
}

/// Worst-case distance from each selected center to its nearest true weight
/// of the given layer (sign-invariant).
fn worst_assignment_error(
    centers: &ArrayView2<f64>,
    selected: &[usize],
    truth_layer: &Array2<f64>,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in selected {
        let c = centers.row(i).to_owned();
        let best = truth_layer
            .columns()
            .into_iter()
            .map(|t| signed_distance(&c, &t.to_owned()))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    worst
}

/// Run the pipeline on a teacher sampled from the configured architecture.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(RecoveryReport, PipelineArtifacts)> {
    cfg.validate()?;
    let teacher = NetworkParams::sample_from_arch(&cfg.arch, Activation::Tanh, cfg.seed)?;
    run_pipeline_with_teacher(cfg, teacher)
}

/// Run the pipeline against a supplied teacher network.
pub fn run_pipeline_with_teacher(
    cfg: &PipelineConfig,
    teacher: NetworkParams,
) -> Result<(RecoveryReport, PipelineArtifacts)> {
    cfg.validate()?;
    let d = teacher.input_dim();
    let m_l = teacher.output_dim();
    let m = teacher.total_neurons();
    let depth = teacher.depth();
    let widths: Vec<usize> = teacher.widths();
    let oracle = CountingOracle::new(&teacher);

    // Ground truth for evaluation: normalized entangled weights at x* = 0.
    let x_star = Array1::<f64>::zeros(d);
    let ew = teacher.entangled_weights(&x_star.view())?;
    let truth_layers: Vec<Array2<f64>> = ew
        .mats
        .iter()
        .map(|v| {
            let mut out = v.clone();
            for mut col in out.columns_mut() {
                let n = col.dot(&col).sqrt();
                col /= n;
            }
            out
        })
        .collect();
    let truth_all = ew.normalized_columns();
    // Evaluation-only diagnostic; highly coherent teachers can make the true
    // outer products numerically dependent, in which case report NaN.
    let exact_proj = context::exact_projector(&truth_all.view()).ok();

    // Stage 1: build the context.
    let t0 = Instant::now();
    let law = SamplingLaw::uniform_sphere(d, cfg.radius);
    let n_h = cfg.resolved_n_h();
    let mut rng_ctx = crate::stage_rng(cfg.seed, "context");
    let batch = match cfg.hessian_mode {
        HessianMode::Analytic => HessianBatch::sample_analytic(&teacher, &law, n_h, &mut rng_ctx),
        HessianMode::Fd => HessianBatch::sample_fd(&oracle, &law, n_h, cfg.eps, &mut rng_ctx),
    }
    .map_err(|e| e.in_stage("context"))?;
    let projector = context::build_context(&batch, m).map_err(|e| e.in_stage("context"))?;
    let subspace_distance = exact_proj
        .as_ref()
        .map(|p| context::subspace_distance(&projector, p))
        .unwrap_or(f64::NAN);
    let singular_gap = projector.singular_gap();
    let context_s = t0.elapsed().as_secs_f64();

    // Stage 2: weight recovery.
    let t0 = Instant::now();
    let rec_cfg = RecoveryConfig {
        n_restarts: cfg.resolved_restarts(),
        max_iters: cfg.power_steps,
        gamma: cfg.gamma,
        tol: cfg.power_tol,
        min_phi: cfg.min_phi,
        seed: cfg.seed,
        coarse_f32: cfg.coarse_f32,
    };
    let candidates =
        power::recover_candidates(&projector, &rec_cfg).map_err(|e| e.in_stage("recovery"))?;
    let accepted = candidates.accepted_vectors();
    let recov = recovery_rate(&accepted.view(), &truth_all.view());
    let false_pos = false_positive_rate(&accepted.view(), &truth_all.view());
    let recovery_s = t0.elapsed().as_secs_f64();

    // Stage 3: weight assignment.
    let t0 = Instant::now();
    let mut assignment_out: Option<AssignmentResult> = None;
    let mut e1 = None;
    let mut e_l = None;
    let mut center_matching_error = None;
    if cfg.run_assignment {
        let km = KmeansConfig {
            seed: cfg.seed,
            ..cfg.kmeans.clone()
        };
        let (centers, populations) =
            assignment::cluster(&candidates, m, &km).map_err(|e| e.in_stage("assignment"))?;
        center_matching_error = Some(hungarian_matching_error(
            &centers.view(),
            &truth_all.view(),
        ));
        let result = if depth == 1 {
            let all: Vec<usize> = (0..m).collect();
            AssignmentResult {
                centers: centers.clone(),
                populations: populations.clone(),
                first_layer: all.clone(),
                last_layer: all.clone(),
                inner: Vec::new(),
                sim_first: vec![f64::NAN; m],
                sim_last: vec![f64::NAN; m],
                last_layer_slots: oracle_last_slots(&centers, &truth_layers, &(0..m).collect::<Vec<_>>()),
            }
        } else if depth <= 3 && !cfg.oracle_assignment {
            let law1 = SamplingLaw::uniform_sphere(d, cfg.first_layer_radius_factor * (d as f64).sqrt());
            let mut rng_first = crate::stage_rng(cfg.seed, "assign-first");
            let batch1 = match cfg.hessian_mode {
                HessianMode::Analytic => HessianBatch::sample_analytic(
                    &teacher,
                    &law1,
                    cfg.first_layer_hessians,
                    &mut rng_first,
                ),
                HessianMode::Fd => HessianBatch::sample_fd(
                    &oracle,
                    &law1,
                    cfg.first_layer_hessians,
                    cfg.eps,
                    &mut rng_first,
                ),
            }
            .map_err(|e| e.in_stage("assignment"))?;
            let (first_idx, sim_first) =
                assignment::detect_first_layer(&batch1, &centers.view(), &populations, widths[1])
                    .map_err(|e| e.in_stage("assignment"))?;
            // Last layer via leave-one-out on the context batch (reused).
            let (last_idx, slots, sim_last) = assignment::detect_last_layer(
                &batch,
                &centers.view(),
                &populations,
                m,
                m_l,
                &first_idx,
            )
            .map_err(|e| e.in_stage("assignment"))?;
            let inner: Vec<usize> = (0..m)
                .filter(|i| !first_idx.contains(i) && !last_idx.contains(i))
                .collect();
            AssignmentResult {
                centers: centers.clone(),
                populations: populations.clone(),
                first_layer: first_idx,
                last_layer: last_idx,
                inner,
                sim_first,
                sim_last,
                last_layer_slots: slots,
            }
        } else if cfg.oracle_assignment {
            oracle_assignment(&centers, &populations, &truth_layers)
        } else {
            return Err(Error::OracleAssignmentRequired.in_stage("assignment"));
        };
        e1 = Some(worst_assignment_error(
            &result.centers.view(),
            &result.first_layer,
            &truth_layers[0],
        ));
        e_l = Some(worst_assignment_error(
            &result.centers.view(),
            &result.last_layer,
            &truth_layers[depth - 1],
        ));
        assignment_out = Some(result);
    }
    let assignment_s = t0.elapsed().as_secs_f64();

    // Stage 4: completion.
    let t0 = Instant::now();
    let mut completion_out = None;
    let mut completion_report = None;
    if cfg.run_completion {
        let asg = assignment_out
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("completion requires assignment".into()))?;
        let v_mats =
            assemble_layer_matrices(asg, depth, &widths).map_err(|e| e.in_stage("completion"))?;
        let problem = CompletionProblem::new(v_mats, (0..m_l).collect(), Activation::Tanh)
            .map_err(|e| e.in_stage("completion"))?;
        let mut rng_train = crate::stage_rng(cfg.seed, "completion-train");
        let data = TrainSet::sample(&oracle, cfg.n_f, &mut rng_train);
        let mut rng_test = crate::stage_rng(cfg.seed, "completion-test");
        let test = TrainSet::sample(&teacher, cfg.n_test, &mut rng_test);
        let test_targets = problem.permute_targets(&test.y.view());
        let shift_match = layer_shift_matching(&problem, &teacher, &truth_layers);
        let fit_cfg = FitConfig {
            lr: cfg.completion_lr,
            max_steps: cfg.completion_steps,
            eval_every: cfg.completion_eval_every,
            ..FitConfig::default()
        };
        let probe_problem = problem.clone();
        let probe_teacher = teacher.clone();
        let (params, history) = completion::fit(&problem, &data, &fit_cfg, |_step, p| {
            let pred = completion::completed_forward_batch(&probe_problem, p, &test.x.view());
            let mse = completion::relative_mse(&pred.view(), &test_targets.view());
            let e_inf = completion::relative_sup_error(&pred.view(), &test_targets.view());
            let mut row = vec![mse, e_inf];
            row.extend(shift_errors(&probe_teacher, p, &shift_match));
            row
        })
        .map_err(|e| e.in_stage("completion"))?;
        let last = history.rows.last().expect("fit records at least one row");
        completion_report = Some(CompletionReport {
            mse: last.probe[0],
            e_inf: last.probe[1],
            e_theta: last.probe[2..].to_vec(),
            final_loss: last.loss,
            steps_run: history.steps_run,
            monotone_fraction: history.monotone_fraction,
        });
        completion_out = Some((problem, params, history));
    }
    let completion_s = t0.elapsed().as_secs_f64();

    let report = RecoveryReport {
        widths,
        seed: cfg.seed,
        subspace_distance,
        singular_gap,
        recov,
        false_pos,
        accepted_candidates: accepted.nrows(),
        total_candidates: candidates.len(),
        center_matching_error,
        e1,
        e_l,
        completion: completion_report,
        query_count: oracle.queries(),
        hessian_count: batch.count(),
        timings: StageTimings {
            context_s,
            recovery_s,
            assignment_s,
            completion_s,
        },
    };
    let artifacts = PipelineArtifacts {
        teacher,
        truth_layers,
        projector,
        candidates,
        assignment: assignment_out,
        completion: completion_out,
    };
    Ok((report, artifacts))
}

/// Expected oracle query count for a run of the given configuration.
pub fn expected_query_count(cfg: &PipelineConfig) -> u64 {
    let d = cfg.arch.input_dim;
    let mut q = 0u64;
    if cfg.hessian_mode == HessianMode::Fd {
        q += cfg.resolved_n_h() as u64 * fd_query_count(d);
        if cfg.run_assignment && cfg.arch.depth >= 2 && cfg.arch.depth <= 3 && !cfg.oracle_assignment
        {
            q += cfg.first_layer_hessians as u64 * fd_query_count(d);
        }
    }
    if cfg.run_completion {
        q += cfg.n_f as u64;
    }
    q
}

/// Group centers into per-layer matrices; the last layer is ordered by its
/// resolved output slots so the model's outputs line up with the teacher's.
fn assemble_layer_matrices(
    asg: &AssignmentResult,
    depth: usize,
    widths: &[usize],
) -> Result<Vec<Array2<f64>>> {
    let d = asg.centers.ncols();
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(depth);
    if depth == 1 {
        groups.push(asg.first_layer.clone());
    } else {
        groups.push(asg.first_layer.clone());
        if depth == 2 {
            groups.push(Vec::new()); // placeholder, filled by slots below
        } else {
            // All inner layers beyond 3 remain a single undifferentiated group
            // only when depth == 3; deeper nets arrive here via the oracle
            // assignment which orders `inner` by layer already.
            groups.extend(split_inner(&asg.inner, &widths[2..depth]));
            groups.push(Vec::new());
        }
    }
    // Resolve the last layer by slot.
    let m_l = asg.last_layer.len();
    let mut by_slot = vec![usize::MAX; m_l];
    let mut seen = vec![false; m_l];
    let mut collision = false;
    for (&idx, &slot) in asg.last_layer.iter().zip(asg.last_layer_slots.iter()) {
        if slot < m_l && !seen[slot] {
            by_slot[slot] = idx;
            seen[slot] = true;
        } else {
            collision = true;
        }
    }
    if collision || by_slot.iter().any(|&v| v == usize::MAX) {
        return Err(Error::InvalidConfig(
            "last-layer slot hints do not form a permutation".into(),
        ));
    }
    let last_group = groups.last_mut().expect("at least one group");
    *last_group = by_slot;

    let mut v_mats = Vec::with_capacity(depth);
    for (l, group) in groups.iter().enumerate() {
        if group.len() != widths[l + 1] {
            return Err(Error::InvalidConfig(format!(
                "layer {} group has {} centers, expected {}",
                l + 1,
                group.len(),
                widths[l + 1]
            )));
        }
        let mut mat = Array2::<f64>::zeros((d, group.len()));
        for (j, &idx) in group.iter().enumerate() {
            mat.column_mut(j).assign(&asg.centers.row(idx));
        }
        v_mats.push(mat);
    }
    Ok(v_mats)
}

fn split_inner(inner: &[usize], inner_widths: &[usize]) -> Vec<Vec<usize>> {
    // inner_widths covers layers 2..L; the last entry is the output layer, so
    // only inner_widths[..len-1] are actual inner layers.
    let mut out = Vec::new();
    let mut cursor = 0usize;
    for &w in &inner_widths[..inner_widths.len() - 1] {
        out.push(inner[cursor..cursor + w].to_vec());
        cursor += w;
    }
    out
}

/// Oracle assignment: bijectively match centers to true weights and read the
/// layer attribution off the matched truth.
fn oracle_assignment(
    centers: &Array2<f64>,
    populations: &[usize],
    truth_layers: &[Array2<f64>],
) -> AssignmentResult {
    let m = centers.nrows();
    let mut truth_cols: Vec<(usize, usize, Array1<f64>)> = Vec::with_capacity(m);
    for (l, layer) in truth_layers.iter().enumerate() {
        for (j, col) in layer.columns().into_iter().enumerate() {
            truth_cols.push((l, j, col.to_owned()));
        }
    }
    let mut cost = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        let c = centers.row(i).to_owned();
        for (k, (_, _, t)) in truth_cols.iter().enumerate() {
            cost[(i, k)] = signed_distance(&c, t);
        }
    }
    let assign = hungarian(&cost);
    let depth = truth_layers.len();
    let mut first = Vec::new();
    let mut last = Vec::new();
    let mut inner = Vec::new();
    let mut slots_by_center: Vec<(usize, usize)> = Vec::new();
    for i in 0..m {
        let (l, j, _) = truth_cols[assign[i]];
        if l == 0 {
            first.push(i);
        }
        if l == depth - 1 {
            last.push(i);
            slots_by_center.push((i, j));
        }
        if l > 0 && l < depth - 1 {
            inner.push(i);
        }
    }
    // Keep inner ordered by matched layer, then index, so group splitting by
    // widths reconstructs the layers.
    inner.sort_by_key(|&i| {
        let (l, j, _) = truth_cols[assign[i]];
        (l, j)
    });
    last.sort_unstable();
    let slots: Vec<usize> = last
        .iter()
        .map(|&i| {
            slots_by_center
                .iter()
                .find(|(c, _)| *c == i)
                .expect("slot recorded")
                .1
        })
        .collect();
    first.sort_unstable();
    AssignmentResult {
        centers: centers.clone(),
        populations: populations.to_vec(),
        first_layer: first,
        last_layer: last,
        inner,
        sim_first: vec![f64::NAN; m],
        sim_last: vec![f64::NAN; m],
        last_layer_slots: slots,
    }
}

fn oracle_last_slots(
    centers: &Array2<f64>,
    truth_layers: &[Array2<f64>],
    last: &[usize],
) -> Vec<usize> {
    let layer = truth_layers.last().expect("at least one layer");
    let n = last.len();
    let mut cost = Array2::<f64>::zeros((n, n));
    for (r, &i) in last.iter().enumerate() {
        let c = centers.row(i).to_owned();
        for (s, t) in layer.columns().into_iter().enumerate() {
            cost[(r, s)] = signed_distance(&c, &t.to_owned());
        }
    }
    let assign = hungarian(&cost);
    assign
}

/// Per-layer bijection between completion columns and teacher neurons, used
/// for the relative shift errors.
fn layer_shift_matching(
    problem: &CompletionProblem,
    _teacher: &NetworkParams,
    truth_layers: &[Array2<f64>],
) -> Vec<Vec<usize>> {
    problem
        .v_mats()
        .iter()
        .zip(truth_layers.iter())
        .map(|(v, truth)| {
            let n = v.ncols();
            let mut cost = Array2::<f64>::zeros((n, n));
            for (j, col) in v.columns().into_iter().enumerate() {
                let mut c = col.to_owned();
                let norm = c.dot(&c).sqrt();
                if norm > 0.0 {
                    c /= norm;
                }
                for (k, t) in truth.columns().into_iter().enumerate() {
                    cost[(j, k)] = signed_distance(&c, &t.to_owned());
                }
            }
            hungarian(&cost)
        })
        .collect()
}

fn shift_errors(
    teacher: &NetworkParams,
    params: &CompletionParams,
    matching: &[Vec<usize>],
) -> Vec<f64> {
    (0..teacher.depth())
        .map(|l| {
            let tau = teacher.shift(l);
            let q = &matching[l];
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, &k) in q.iter().enumerate() {
                let diff = params.shifts[l][j] - tau[k];
                num += diff * diff;
                den += tau[k] * tau[k];
            }
            num / den
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Table3,
    RecoveryFigures,
    GdComparison,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Experiment::Table3),
            "recovery-figures" => Ok(Experiment::RecoveryFigures),
            "gd-comparison" => Ok(Experiment::GdComparison),
            other => Err(Error::InvalidConfig(format!("unknown experiment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub experiment: Experiment,
    pub scale: Scale,
    pub cells: Vec<CellSummary>,
    pub all_passed: bool,
}

impl ExperimentSummary {
    fn finish(mut self) -> Self {
        self.all_passed = self.cells.iter().all(|c| c.passed);
        self
    }
}

/// Seeds per experiment cell.
pub const TRIALS_PER_CELL: usize = 5;

fn cell_seed(cell: usize, trial: usize) -> u64 {
    1000 + 100 * cell as u64 + trial as u64
}

/// Run a named experiment, writing metric CSVs and a summary JSON into
/// `out_dir`.
pub fn reproduce(experiment: Experiment, scale: Scale, out_dir: &Path) -> Result<ExperimentSummary> {
    std::fs::create_dir_all(out_dir)?;
    let summary = match experiment {
        Experiment::RecoveryFigures => reproduce_recovery_figures(scale, out_dir)?,
        Experiment::Table3 => reproduce_table3(scale, out_dir)?,
        Experiment::GdComparison => reproduce_gd_comparison(scale, out_dir)?,
    };
    let file = std::fs::File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(file, &summary)?;
    Ok(summary)
}

/// Config for one recovery-figures cell.
pub fn recovery_figures_config(
    depth: usize,
    contraction: f64,
    m: usize,
    seed: u64,
    scale: Scale,
) -> Result<PipelineConfig> {
    let arch = Architecture::new(100, depth, 10, m, contraction)?;
    let mut cfg = match scale {
        Scale::Desk => PipelineConfig::desk(arch, seed),
        Scale::Full => PipelineConfig::new(arch, seed),
    };
    cfg.hessian_mode = HessianMode::Fd;
    cfg.radius = 0.01;
    cfg.run_assignment = false;
    cfg.run_completion = false;
    Ok(cfg)
}

fn reproduce_recovery_figures(scale: Scale, out_dir: &Path) -> Result<ExperimentSummary> {
    let mut csv = std::fs::File::create(out_dir.join("recovery_figures.csv"))?;
    writeln!(
        csv,
        "depth,contraction,m,trial,seed,recov,false_pos,subspace_distance,accepted,queries,seconds"
    )?;
    let mut cells = Vec::new();
    let mut cell_idx = 0usize;
    for &depth in &[2usize, 3] {
        for &c in &[0.5, 1.0] {
            for &m in &[200usize, 400] {
                let mut good = 0usize;
                let mut details = Vec::new();
                for trial in 0..TRIALS_PER_CELL {
                    let seed = cell_seed(cell_idx, trial);
                    let cfg = recovery_figures_config(depth, c, m, seed, scale)?;
                    let t = Instant::now();
                    let (report, _) = run_pipeline(&cfg)?;
                    let secs = t.elapsed().as_secs_f64();
                    writeln!(
                        csv,
                        "{depth},{c},{m},{trial},{seed},{},{},{},{},{},{secs:.1}",
                        report.recov,
                        report.false_pos,
                        report.subspace_distance,
                        report.accepted_candidates,
                        report.query_count
                    )?;
                    if report.recov >= 1.0 - 1e-12 && report.false_pos == 0.0 {
                        good += 1;
                    }
                    details.push(serde_json::json!({
                        "trial": trial,
                        "recov": report.recov,
                        "false_pos": report.false_pos,
                        "distance": report.subspace_distance,
                    }));
                }
                cells.push(CellSummary {
                    label: format!("L={depth} c={c} m={m}"),
                    passed: good >= 4,
                    details: serde_json::json!({"good_trials": good, "trials": details}),
                });
                cell_idx += 1;
            }
        }
    }
    Ok(ExperimentSummary {
        experiment: Experiment::RecoveryFigures,
        scale,
        cells,
        all_passed: false,
    }
    .finish())
}

/// Config for one table-3 cell (assignment quality).
pub fn table3_config(
    depth: usize,
    contraction: f64,
    m: usize,
    seed: u64,
    scale: Scale,
) -> Result<PipelineConfig> {
    let arch = Architecture::new(50, depth, 10, m, contraction)?;
    let mut cfg = match scale {
        Scale::Desk => PipelineConfig::desk(arch, seed),
        Scale::Full => PipelineConfig::new(arch, seed),
    };
    cfg.hessian_mode = HessianMode::Analytic;
    cfg.run_assignment = true;
    cfg.run_completion = false;
    Ok(cfg)
}

fn reproduce_table3(scale: Scale, out_dir: &Path) -> Result<ExperimentSummary> {
    let mut csv = std::fs::File::create(out_dir.join("table3.csv"))?;
    writeln!(csv, "depth,contraction,m,trial,seed,e1,e_l,recov,seconds")?;
    let mut cells = Vec::new();
    let mut cell_idx = 100usize;
    let grid: Vec<(usize, f64)> = vec![(2, 1.0), (3, 0.6), (3, 1.0)];
    for &(depth, c) in &grid {
        for &m in &[100usize, 200] {
            let mut e1_sum = 0.0;
            let mut el_sum = 0.0;
            let mut rows = Vec::new();
            for trial in 0..TRIALS_PER_CELL {
                let seed = cell_seed(cell_idx, trial);
                let cfg = table3_config(depth, c, m, seed, scale)?;
                let t = Instant::now();
                let (report, _) = run_pipeline(&cfg)?;
                let secs = t.elapsed().as_secs_f64();
                let e1 = report.e1.unwrap_or(f64::NAN);
                let el = report.e_l.unwrap_or(f64::NAN);
                writeln!(
                    csv,
                    "{depth},{c},{m},{trial},{seed},{e1},{el},{},{secs:.1}",
                    report.recov
                )?;
                e1_sum += e1;
                el_sum += el;
                rows.push(serde_json::json!({"trial": trial, "e1": e1, "e_l": el}));
            }
            let e1_avg = e1_sum / TRIALS_PER_CELL as f64;
            let el_avg = el_sum / TRIALS_PER_CELL as f64;
            cells.push(CellSummary {
                label: format!("L={depth} c={c} m={m}"),
                passed: e1_avg <= 0.08 && el_avg <= 0.08,
                details: serde_json::json!({"e1_avg": e1_avg, "e_l_avg": el_avg, "trials": rows}),
            });
            cell_idx += 1;
        }
    }
    Ok(ExperimentSummary {
        experiment: Experiment::Table3,
        scale,
        cells,
        all_passed: false,
    }
    .finish())
}

/// Per-method outcome of the training comparison.
#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: String,
    pub mse: f64,
    pub e_inf: f64,
    pub seconds: f64,
}

/// One seed of the gd-comparison experiment: the four methods on one teacher.
pub fn gd_comparison_trial(seed: u64, scale: Scale) -> Result<Vec<MethodOutcome>> {
    let arch = Architecture::new(50, 3, 10, 75, 0.6)?;
    let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, seed)?;
    let widths = arch.layer_widths()?;
    let d = arch.input_dim;
    let m = arch.total_neurons;

    // Test set shared by all methods.
    let mut rng_test = crate::stage_rng(seed, "gd-test");
    let test = TrainSet::sample(&teacher, 100_000, &mut rng_test);

    // Recovery pipeline (shared by M2 and M3).
    let mut cfg = match scale {
        Scale::Desk => PipelineConfig::desk(arch, seed),
        Scale::Full => PipelineConfig::new(arch, seed),
    };
    cfg.hessian_mode = HessianMode::Fd;
    cfg.run_assignment = true;
    cfg.run_completion = false;
    let (_, artifacts) = run_pipeline(&cfg)?;
    let asg = artifacts.assignment.as_ref().expect("assignment ran");
    let teacher_widths = teacher.widths();
    let v_approx = assemble_layer_matrices(asg, teacher.depth(), &teacher_widths)?;

    // Exact normalized entangled weights for M4.
    let x_star = Array1::<f64>::zeros(d);
    let ew = teacher.entangled_weights(&x_star.view())?;
    let v_exact: Vec<Array2<f64>> = ew
        .mats
        .iter()
        .map(|v| {
            let mut out = v.clone();
            for mut col in out.columns_mut() {
                let n = col.dot(&col).sqrt();
                col /= n;
            }
            out
        })
        .collect();

    let completion_steps = match scale {
        Scale::Desk => 1500,
        Scale::Full => 50_000,
    };
    let sgd_epochs = match scale {
        Scale::Desk => 25,
        Scale::Full => 200,
    };

    // M1/M2 train on D^2 * m random samples, the pipeline's query budget.
    let mut rng_sgd = crate::stage_rng(seed, "gd-sgd-data");
    let sgd_data = TrainSet::sample(&teacher, d * d * m, &mut rng_sgd);
    let eval_net = |net: &NetworkParams| -> Result<(f64, f64)> {
        let pred = net.eval_batch(&test.x.view())?;
        Ok((
            completion::relative_mse(&pred.view(), &test.y.view()),
            completion::relative_sup_error(&pred.view(), &test.y.view()),
        ))
    };

    let mut outcomes = Vec::new();

    // M1: SGD from random initialization.
    let t = Instant::now();
    let sgd_cfg = completion::SgdConfig {
        epochs: sgd_epochs,
        seed,
        ..completion::SgdConfig::default()
    };
    let m1 = completion::sgd_baseline(
        d,
        &widths,
        Activation::Tanh,
        completion::BaselineInit::Random { seed: seed ^ 0x5eed },
        &sgd_data,
        &sgd_cfg,
        |_, _| {},
    )?;
    let (mse, e_inf) = eval_net(&m1)?;
    outcomes.push(MethodOutcome {
        method: "M1".into(),
        mse,
        e_inf,
        seconds: t.elapsed().as_secs_f64(),
    });

    // M2: SGD initialized from the recovered entangled weights.
    let t = Instant::now();
    let m2 = completion::sgd_baseline(
        d,
        &widths,
        Activation::Tanh,
        completion::BaselineInit::Entangled { v_mats: &v_approx },
        &sgd_data,
        &sgd_cfg,
        |_, _| {},
    )?;
    let (mse, e_inf) = eval_net(&m2)?;
    outcomes.push(MethodOutcome {
        method: "M2".into(),
        mse,
        e_inf,
        seconds: t.elapsed().as_secs_f64(),
    });

    // M3/M4: gradient descent on the completion objective.
    for (name, mats) in [("M3", &v_approx), ("M4", &v_exact)] {
        let t = Instant::now();
        let m_l = teacher.output_dim();
        let problem = CompletionProblem::new(mats.clone(), (0..m_l).collect(), Activation::Tanh)?;
        let mut rng_train = crate::stage_rng(seed, "completion-train");
        let data = TrainSet::sample(&teacher, 10_000, &mut rng_train);
        let fit_cfg = FitConfig {
            max_steps: completion_steps,
            eval_every: completion_steps,
            ..FitConfig::default()
        };
        let (params, _) = completion::fit(&problem, &data, &fit_cfg, |_, _| Vec::new())?;
        let pred = completion::completed_forward_batch(&problem, &params, &test.x.view());
        let target = problem.permute_targets(&test.y.view());
        outcomes.push(MethodOutcome {
            method: name.into(),
            mse: completion::relative_mse(&pred.view(), &target.view()),
            e_inf: completion::relative_sup_error(&pred.view(), &target.view()),
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(outcomes)
}

fn reproduce_gd_comparison(scale: Scale, out_dir: &Path) -> Result<ExperimentSummary> {
    let mut csv = std::fs::File::create(out_dir.join("gd_comparison.csv"))?;
    writeln!(csv, "seed,method,mse,e_inf,seconds")?;
    let mut orderings_m1_m3 = 0usize;
    let mut orderings_m1_m2 = 0usize;
    let mut rows = Vec::new();
    for trial in 0..TRIALS_PER_CELL {
        let seed = cell_seed(900, trial);
        let outcomes = gd_comparison_trial(seed, scale)?;
        for o in &outcomes {
            writeln!(csv, "{seed},{},{},{},{:.1}", o.method, o.mse, o.e_inf, o.seconds)?;
        }
        let find = |name: &str| outcomes.iter().find(|o| o.method == name).unwrap();
        let (m1, m2, m3) = (find("M1"), find("M2"), find("M3"));
        if m1.e_inf > m3.e_inf {
            orderings_m1_m3 += 1;
        }
        if m1.e_inf > m2.e_inf {
            orderings_m1_m2 += 1;
        }
        rows.push(serde_json::json!({
            "seed": seed,
            "e_inf": {
                "M1": m1.e_inf, "M2": m2.e_inf, "M3": m3.e_inf,
                "M4": find("M4").e_inf,
            },
        }));
    }
    let cells = vec![CellSummary {
        label: "baseline ordering".into(),
        passed: orderings_m1_m3 >= 4 && orderings_m1_m2 >= 4,
        details: serde_json::json!({
            "m1_gt_m3": orderings_m1_m3,
            "m1_gt_m2": orderings_m1_m2,
            "trials": rows,
        }),
    }];
    Ok(ExperimentSummary {
        experiment: Experiment::GdComparison,
        scale,
        cells,
        all_passed: false,
    }
    .finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recovery_and_false_positive_rates_trivials() {
        let truth = array![[1.0, 0.0], [0.0, 1.0]].t().to_owned(); // columns e1, e2
        let truth = truth.t().to_owned();
        // candidates == truth rows.
        let cands = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(recovery_rate(&cands.view(), &truth.view()), 1.0);
        assert_eq!(false_positive_rate(&cands.view(), &truth.view()), 0.0);
        // sign flips are matched too
        let flipped = array![[-1.0, 0.0], [0.0, -1.0]];
        assert_eq!(recovery_rate(&flipped.view(), &truth.view()), 1.0);
    }

    #[test]
    fn false_positive_arithmetic() {
        // 9 true candidates and one alien: rate 0.1.
        let d = 4;
        let mut truth = Array2::<f64>::zeros((d, 9));
        let mut rng = crate::stage_rng(3, "harness-test");
        for j in 0..9 {
            truth
                .column_mut(j)
                .assign(&crate::net::unit_sphere_sample(d, &mut rng));
        }
        let mut cands = truth.t().to_owned();
        let alien = array![[0.5, -0.5, 0.5, -0.5]];
        cands.append(ndarray::Axis(0), alien.view()).unwrap();
        let fp = false_positive_rate(&cands.view(), &truth.view());
        let expected = {
            // The alien might accidentally fall near a truth column; check.
            let within = truth.columns().into_iter().any(|t| {
                let a = alien.row(0).to_owned();
                super::signed_distance(&a, &t.to_owned()) <= 0.05
            });
            if within {
                0.0
            } else {
                0.1
            }
        };
        assert!((fp - expected).abs() <= 1e-12);
    }

    #[test]
    fn rates_agree_with_brute_force_oracle() {
        let d = 6;
        let mut rng = crate::stage_rng(5, "harness-test");
        let mut truth = Array2::<f64>::zeros((d, 5));
        for j in 0..5 {
            truth
                .column_mut(j)
                .assign(&crate::net::unit_sphere_sample(d, &mut rng));
        }
        let mut cands = Array2::<f64>::zeros((12, d));
        for i in 0..12 {
            if i % 3 == 0 {
                let mut v = truth.column(i % 5).to_owned();
                v[0] += 0.01;
                let n = v.dot(&v).sqrt();
                cands.row_mut(i).assign(&(&v / n));
            } else {
                cands
                    .row_mut(i)
                    .assign(&crate::net::unit_sphere_sample(d, &mut rng));
            }
        }
        // Independent double-loop oracle.
        let mut covered = 0;
        for j in 0..5 {
            let t = truth.column(j).to_owned();
            let mut hit = false;
            for i in 0..12 {
                let c = cands.row(i).to_owned();
                let dplus = (&c - &t).mapv(|v| v * v).sum().sqrt();
                let dminus = (&c + &t).mapv(|v| v * v).sum().sqrt();
                if dplus.min(dminus) <= 0.05 {
                    hit = true;
                    break;
                }
            }
            if hit {
                covered += 1;
            }
        }
        let want_recov = covered as f64 / 5.0;
        assert_eq!(recovery_rate(&cands.view(), &truth.view()), want_recov);
    }

    #[test]
    fn hungarian_small_cases() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let assign = hungarian(&cost);
        // Optimal assignment: row0 -> col1 (1), row1 -> col0 (2), row2 -> col2 (2).
        assert_eq!(assign, vec![1, 0, 2]);
    }

    #[test]
    fn expected_query_count_matches_actual_on_tiny_case() {
        let arch = Architecture::new(6, 2, 2, 6, 1.0).unwrap();
        let mut cfg = PipelineConfig::desk(arch, 7);
        cfg.n_h = Some(6);
        cfg.n_restarts = Some(60);
        cfg.power_steps = 300;
        cfg.first_layer_hessians = 5;
        cfg.n_f = 40;
        cfg.completion_steps = 50;
        cfg.n_test = 100;
        let (report, _) = run_pipeline(&cfg).unwrap();
        assert_eq!(report.query_count, expected_query_count(&cfg));
    }

    #[test]
    fn missing_architecture_field_is_a_validation_error() {
        let text = r#"{
            "arch": {"input_dim": 10, "depth": 2, "output_dim": 2, "contraction": 1.0},
            "seed": 1
        }"#;
        let parsed: std::result::Result<PipelineConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn config_round_trip_is_stable() {
        let arch = Architecture::new(50, 3, 10, 100, 1.0).unwrap();
        let cfg = PipelineConfig::desk(arch, 42);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        let text2 = serde_json::to_string(&back).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn oracle_assignment_required_for_deep_nets() {
        let arch = Architecture::new(12, 4, 2, 14, 1.0).unwrap();
        let mut cfg = PipelineConfig::desk(arch, 3);
        cfg.n_h = Some(30);
        cfg.n_restarts = Some(200);
        cfg.power_steps = 400;
        cfg.run_completion = false;
        let err = match run_pipeline(&cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected oracle-assignment error"),
        };
        assert!(err.to_string().contains("oracle assignment"), "{err}");
    }
}

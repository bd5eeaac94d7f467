//! Weight assignment: cluster restart outputs to one representative per
//! neuron, then attribute representatives to the first and last layers.

use crate::context::{self, SubspaceProjector};
use crate::derivatives::HessianBatch;
use crate::error::{Error, Result};
use crate::par;
use crate::power::CandidateSet;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use std::io::Write;

/// Cluster centers partitioned into layer groups, with the score tables that
/// drove the decisions.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    /// Unit-norm cluster centers, one per row.
    pub centers: Array2<f64>,
    /// Candidates assigned to each center.
    pub populations: Vec<usize>,
    pub first_layer: Vec<usize>,
    pub last_layer: Vec<usize>,
    pub inner: Vec<usize>,
    /// Hessian-correlation similarity per center (first-layer detector).
    pub sim_first: Vec<f64>,
    /// Leave-one-out similarity per center; NaN when the detector did not run.
    pub sim_last: Vec<f64>,
    /// For each entry of `last_layer`, the output slot it corresponds to.
    pub last_layer_slots: Vec<usize>,
}

impl AssignmentResult {
    pub fn export_json<W: Write>(&self, mut w: W) -> Result<()> {
        let centers: Vec<Vec<f64>> = self.centers.rows().into_iter().map(|r| r.to_vec()).collect();
        let doc = serde_json::json!({
            "centers": centers,
            "populations": self.populations,
            "first_layer": self.first_layer,
            "last_layer": self.last_layer,
            "inner": self.inner,
            "sim_first": self.sim_first,
            "sim_last": self.sim_last,
            "last_layer_slots": self.last_layer_slots,
        });
        serde_json::to_writer(&mut w, &doc)?;
        Ok(())
    }
}

/// kMeans configuration; defaults follow the pipeline conventions
/// (kMeans++ seeding, 10 restarts, Lloyd to 1e-8 displacement or 200 rounds).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KmeansConfig {
    pub restarts: usize,
    pub max_rounds: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            restarts: 10,
            max_rounds: 200,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// Plain kMeans with kMeans++ seeding; returns centers, labels, and the
/// within-cluster sum of squares. Empty clusters are reseeded from the point
/// farthest from its assigned center.
fn kmeans_once<R: Rng>(
    points: &ArrayView2<f64>,
    k: usize,
    cfg: &KmeansConfig,
    rng: &mut R,
) -> (Array2<f64>, Vec<usize>, f64) {
    let n = points.nrows();
    let d = points.ncols();
    let sq_norms: Vec<f64> = points.rows().into_iter().map(|r| r.dot(&r)).collect();

    // kMeans++ seeding.
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| {
            let diff = &points.row(i) - &centers.row(0);
            diff.dot(&diff)
        })
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.row_mut(c).assign(&points.row(idx));
        for i in 0..n {
            let diff = &points.row(i) - &centers.row(c);
            let d2 = diff.dot(&diff);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }

    let mut labels = vec![0usize; n];
    let mut wcss = f64::INFINITY;
    for _ in 0..cfg.max_rounds {
        // Assign step via the inner-product expansion of the distances.
        let dots = points.dot(&centers.t()); // n x k
        let c_norms: Vec<f64> = centers.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut new_wcss = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_norms[i] - 2.0 * dots[(i, c)] + c_norms[c];
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = c;
                }
            }
            labels[i] = best;
            new_wcss += best_d2.max(0.0);
        }
        // Update step.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(labels[i]);
            row += &points.row(i);
            counts[labels[i]] += 1;
        }
        let mut displacement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = {
                            let diff = &points.row(a) - &centers.row(labels[a]);
                            diff.dot(&diff)
                        };
                        let db = {
                            let diff = &points.row(b) - &centers.row(labels[b]);
                            diff.dot(&diff)
                        };
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers.row_mut(c).assign(&points.row(far));
                displacement = f64::INFINITY;
                continue;
            }
            let new_c = &sums.row(c) / counts[c] as f64;
            let diff = &new_c - &centers.row(c);
            displacement = displacement.max(diff.dot(&diff).sqrt());
            centers.row_mut(c).assign(&new_c);
        }
        wcss = new_wcss;
        if displacement <= cfg.tol {
            break;
        }
    }
    (centers, labels, wcss)
}

/// Reduce accepted candidates to `m` unit-norm representatives.
///
/// Candidates must already be sign-canonicalized (half-sphere convention).
/// Returns centers (rows) and per-center populations, best of the configured
/// seeded restarts by within-cluster sum of squares.
pub fn cluster(
    candidates: &CandidateSet,
    m: usize,
    cfg: &KmeansConfig,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let accepted = candidates.accepted_vectors();
    if accepted.nrows() < m {
        return Err(Error::TooFewCandidates {
            needed: m,
            got: accepted.nrows(),
        });
    }
    let runs = par::map_range(cfg.restarts.max(1), |r| {
        let mut rng = crate::stage_rng(cfg.seed, &format!("kmeans-{r}"));
        kmeans_once(&accepted.view(), m, cfg, &mut rng)
    });
    let (mut centers, labels, _) = runs
        .into_iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
        .expect("at least one restart");
    let mut populations = vec![0usize; m];
    for &l in &labels {
        populations[l] += 1;
    }
    for mut row in centers.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    Ok((centers, populations))
}

/// Score every center by its best correlation with a normalized Hessian:
/// Sim_1(u) = max_H |<u (x) u, H / ||H||_F>|.
pub fn first_layer_scores(batch: &HessianBatch, centers: &ArrayView2<f64>) -> Result<Vec<f64>> {
    let m = centers.nrows();
    let mut scores = vec![0.0f64; m];
    let norms: Vec<f64> = batch
        .mats
        .iter()
        .map(|h| h.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.iter().all(|&n| n <= 1e-300) {
        return Err(Error::SaturatedSamplingLaw);
    }
    let per_h = par::map_slice(&batch.mats, |h| {
        let hc = h.dot(&centers.t()); // d x m
        let mut vals = vec![0.0f64; m];
        for (c, col) in hc.columns().into_iter().enumerate() {
            vals[c] = centers.row(c).dot(&col).abs();
        }
        vals
    });
    for (h_idx, vals) in per_h.iter().enumerate() {
        if norms[h_idx] <= 1e-300 {
            continue;
        }
        for c in 0..m {
            let s = vals[c] / norms[h_idx];
            if s > scores[c] {
                scores[c] = s;
            }
        }
    }
    Ok(scores)
}

/// Pick the `m_1` indices with the largest Sim_1 scores; ties broken by
/// cluster population (larger first), then index.
pub fn detect_first_layer(
    batch: &HessianBatch,
    centers: &ArrayView2<f64>,
    populations: &[usize],
    m_1: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let scores = first_layer_scores(batch, centers)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(populations[b].cmp(&populations[a]))
            .then(a.cmp(&b))
    });
    let mut idx: Vec<usize> = order.into_iter().take(m_1).collect();
    idx.sort_unstable();
    Ok((idx, scores))
}

/// Leave-one-output-out projectors P_{-p}, reusing the already-sampled batch:
/// output p's columns are dropped and the subspace dimension shrinks by one.
pub fn leave_one_out_projectors(batch: &HessianBatch, m: usize) -> Result<Vec<SubspaceProjector>> {
    if batch.m_l < 2 {
        return Err(Error::LeaveOneOutUnsupported);
    }
    if m < 2 {
        return Err(Error::InvalidConfig(
            "leave-one-out needs subspace dimension at least 2".into(),
        ));
    }
    let a = batch.stacked_vecs();
    let n_loc = batch.n_locations();
    let gram = a.dot(&a.t());
    let projectors = par::map_range(batch.m_l, |p| -> Result<SubspaceProjector> {
        let keep: Vec<usize> = (0..batch.count()).filter(|&r| r / n_loc != p).collect();
        let sub_a = a.select(Axis(0), &keep);
        let sub_gram = gram.select(Axis(0), &keep).select(Axis(1), &keep);
        context::build_from_gram(&sub_a.view(), &sub_gram, batch.d, m - 1)
    });
    projectors.into_iter().collect()
}

/// Score matrix S_{p,i} = ||P_{-p}(v_i (x) v_i)||_F for all centers.
pub fn last_layer_score_matrix(
    projectors: &[SubspaceProjector],
    centers: &ArrayView2<f64>,
) -> Array2<f64> {
    let m_l = projectors.len();
    let m = centers.nrows();
    let d = centers.ncols();
    let mut outers = Array2::<f64>::zeros((d * d, m));
    for (i, row) in centers.rows().into_iter().enumerate() {
        let mut col = outers.column_mut(i);
        for a in 0..d {
            for b in 0..d {
                col[a * d + b] = row[a] * row[b];
            }
        }
    }
    let rows = par::map_range(m_l, |p| {
        let coeffs = projectors[p].basis().dot(&outers); // (m-1) x m
        let mut out = vec![0.0f64; m];
        for (i, col) in coeffs.columns().into_iter().enumerate() {
            out[i] = col.dot(&col).sqrt();
        }
        out
    });
    let mut s = Array2::<f64>::zeros((m_l, m));
    for (p, row) in rows.into_iter().enumerate() {
        s.row_mut(p).assign(&Array1::from_vec(row));
    }
    s
}

/// Detect the last layer from a score matrix: normalize columns, rank by
/// correlation with the all-ones vector, take the `m_l` smallest. Also
/// returns each selected center's output slot, argmin_p S_{p,i}.
pub fn detect_last_layer_from_scores(
    scores: &Array2<f64>,
    populations: &[usize],
    m_l: usize,
    exclude: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    if scores.nrows() < 2 {
        return Err(Error::LeaveOneOutUnsupported);
    }
    let m = scores.ncols();
    let excluded: std::collections::HashSet<usize> = exclude.iter().copied().collect();
    let mut sim = vec![f64::NAN; m];
    for i in 0..m {
        let col = scores.column(i);
        let norm = col.dot(&col).sqrt();
        sim[i] = if norm > 0.0 { col.sum() / norm } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..m).filter(|i| !excluded.contains(i)).collect();
    if order.len() < m_l {
        return Err(Error::TooFewCandidates {
            needed: m_l,
            got: order.len(),
        });
    }
    order.sort_by(|&a, &b| {
        sim[a]
            .partial_cmp(&sim[b])
            .unwrap()
            .then(populations[b].cmp(&populations[a]))
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(m_l).collect();
    selected.sort_unstable();
    let slots: Vec<usize> = selected
        .iter()
        .map(|&i| {
            let col = scores.column(i);
            let mut best = 0usize;
            let mut best_v = f64::INFINITY;
            for (p, &v) in col.iter().enumerate() {
                if v < best_v {
                    best_v = v;
                    best = p;
                }
            }
            best
        })
        .collect();
    Ok((selected, slots, sim))
}

/// Full last-layer detector: leave-one-out projectors plus score ranking.
pub fn detect_last_layer(
    batch: &HessianBatch,
    centers: &ArrayView2<f64>,
    populations: &[usize],
    m: usize,
    m_l: usize,
    exclude: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let projectors = leave_one_out_projectors(batch, m)?;
    let scores = last_layer_score_matrix(&projectors, centers);
    detect_last_layer_from_scores(&scores, populations, m_l, exclude)
}

//! Cross-stage integration tests at moderate scale.

use entangle::completion::TrainSet;
use entangle::context::{build_context, exact_projector, subspace_distance};
use entangle::derivatives::{HessianBatch, SamplingLaw};
use entangle::harness::{self, HessianMode, PipelineConfig};
use entangle::net::{Activation, Architecture, NetworkParams};
use entangle::power::{self, RecoveryConfig};
use entangle::{assignment, stage_rng};
use ndarray::{Array1, Array2};

fn normalized_truth(teacher: &NetworkParams) -> Array2<f64> {
    let x0 = Array1::zeros(teacher.input_dim());
    teacher
        .entangled_weights(&x0.view())
        .unwrap()
        .normalized_columns()
}

/// Subspace error is nondecreasing in the sampling radius across a decade.
#[test]
fn subspace_error_grows_with_radius() {
    let mut rng = stage_rng(31, "pipeline-test");
    let teacher = NetworkParams::sample(30, &[20, 12, 5], Activation::Tanh, &mut rng).unwrap();
    let m = teacher.total_neurons();
    let truth = exact_projector(&normalized_truth(&teacher).view()).unwrap();
    let mut last = 0.0;
    for (i, radius) in [0.01, 0.1, 1.0, 10.0].into_iter().enumerate() {
        let law = SamplingLaw::uniform_sphere(30, radius);
        let mut rng_h = stage_rng(7, "pipeline-radius");
        let batch = HessianBatch::sample_analytic(&teacher, &law, 4 * m.div_ceil(5), &mut rng_h)
            .unwrap();
        let proj = build_context(&batch, m).unwrap();
        let dist = subspace_distance(&proj, &truth);
        assert!(
            i == 0 || dist >= last - 1e-9,
            "distance not monotone: {last} -> {dist} at R={radius}"
        );
        last = dist;
    }
}

/// FD Hessians cost at most 1e-2 extra subspace distance over analytic ones
/// on the D=50 reference teacher.
#[test]
fn fd_noise_floor_is_small() {
    let arch = Architecture::new(50, 3, 10, 100, 1.0).unwrap();
    let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, 17).unwrap();
    let m = teacher.total_neurons();
    let truth = exact_projector(&normalized_truth(&teacher).view()).unwrap();
    let law = SamplingLaw::uniform_sphere(50, 0.01);
    let n_h = 3 * m.div_ceil(10);
    let mut rng_a = stage_rng(3, "noise-floor");
    let analytic = HessianBatch::sample_analytic(&teacher, &law, n_h, &mut rng_a).unwrap();
    let mut rng_b = stage_rng(3, "noise-floor");
    let fd = HessianBatch::sample_fd(&teacher, &law, n_h, 1e-3, &mut rng_b).unwrap();
    let d_analytic = subspace_distance(&build_context(&analytic, m).unwrap(), &truth);
    let d_fd = subspace_distance(&build_context(&fd, m).unwrap(), &truth);
    assert!(
        d_fd - d_analytic < 1e-2,
        "fd {d_fd} vs analytic {d_analytic}"
    );
}

/// Every accepted candidate on the reference teacher lies within 0.05 of a
/// true normalized entangled weight, and converged runs certify stationarity.
#[test]
fn accepted_candidates_match_reference_weights() {
    let arch = Architecture::new(50, 3, 10, 100, 1.0).unwrap();
    let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, 23).unwrap();
    let m = teacher.total_neurons();
    let truth = normalized_truth(&teacher);
    let law = SamplingLaw::uniform_sphere(50, 0.01);
    let mut rng = stage_rng(5, "ref-recovery");
    let batch = HessianBatch::sample_analytic(&teacher, &law, 3 * m.div_ceil(10), &mut rng).unwrap();
    let proj = build_context(&batch, m).unwrap();
    let cfg = RecoveryConfig {
        n_restarts: 500,
        max_iters: 3000,
        tol: 1e-10,
        seed: 11,
        coarse_f32: true,
        ..RecoveryConfig::default()
    };
    let cands = power::recover_candidates(&proj, &cfg).unwrap();
    for &i in cands.accepted_indices().iter() {
        let c = cands.vectors.row(i).to_owned();
        let best = truth
            .columns()
            .into_iter()
            .map(|t| {
                let plus = (&c - &t).mapv(|v| v * v).sum().sqrt();
                let minus = (&c + &t).mapv(|v| v * v).sum().sqrt();
                plus.min(minus)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 0.05, "accepted candidate {i} off by {best}");
        if cands.iterations[i] < cfg.max_iters {
            assert!(cands.residual[i] <= 1e-8);
        }
    }
}

/// Coupon-collector sanity: with n = ceil(m ln m) + 3m restarts on an exact
/// 30-spike subspace, all spikes are hit in at least 95 of 100 seeded trials.
#[test]
fn coupon_collector_restart_count() {
    let d = 50;
    let k = 30;
    let mut rng = stage_rng(41, "coupon");
    let net = NetworkParams::sample(d, &[k], Activation::Tanh, &mut rng).unwrap();
    let w = net.weight(0).clone();
    let proj = exact_projector(&w.view()).unwrap();
    let n = (k as f64 * (k as f64).ln()).ceil() as usize + 3 * k;
    let mut successes = 0;
    for trial in 0..100 {
        let cfg = RecoveryConfig {
            n_restarts: n,
            max_iters: 1000,
            tol: 1e-8,
            seed: 5000 + trial,
            coarse_f32: true,
            ..RecoveryConfig::default()
        };
        let cands = power::recover_candidates(&proj, &cfg).unwrap();
        let accepted = cands.accepted_vectors();
        let recov = harness::recovery_rate(&accepted.view(), &w.view());
        if recov >= 1.0 - 1e-12 {
            successes += 1;
        }
    }
    assert!(successes >= 95, "all spikes hit in only {successes}/100 trials");
}

/// Over 1000 restarts on an exact 30-spike subspace, every limit point is
/// within 1e-6 of some +-spike or has objective below the acceptance cut.
#[test]
fn restart_limits_are_spikes_or_rejected() {
    let d = 50;
    let k = 30;
    let mut rng = stage_rng(43, "limits");
    let net = NetworkParams::sample(d, &[k], Activation::Tanh, &mut rng).unwrap();
    let w = net.weight(0).clone();
    let proj = exact_projector(&w.view()).unwrap();
    let cfg = RecoveryConfig {
        n_restarts: 1000,
        max_iters: 4000,
        tol: 1e-12,
        seed: 9,
        ..RecoveryConfig::default()
    };
    let cands = power::recover_candidates(&proj, &cfg).unwrap();
    for i in 0..cands.len() {
        if cands.phi[i] < 0.5 {
            continue;
        }
        let c = cands.vectors.row(i).to_owned();
        let best = w
            .columns()
            .into_iter()
            .map(|t| {
                let plus = (&c - &t).mapv(|v| v * v).sum().sqrt();
                let minus = (&c + &t).mapv(|v| v * v).sum().sqrt();
                plus.min(minus)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-6, "restart {i}: distance {best}, phi {}", cands.phi[i]);
    }
}

/// The premise of the last-layer detector: exact leave-one-out subspaces keep
/// ||P_{-p}(v_q (x) v_q)|| near one for q != p and visibly lower for q = p.
#[test]
fn leave_one_out_score_gap() {
    let arch = Architecture::new(40, 2, 5, 45, 1.0).unwrap();
    let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, 29).unwrap();
    let m = teacher.total_neurons();
    let truth = normalized_truth(&teacher);
    let law = SamplingLaw::uniform_sphere(40, 0.01);
    let mut rng = stage_rng(11, "loo-gap");
    let batch = HessianBatch::sample_analytic(&teacher, &law, 6 * m.div_ceil(5), &mut rng).unwrap();
    let projectors = assignment::leave_one_out_projectors(&batch, m).unwrap();
    let centers = truth.t().to_owned();
    let scores = assignment::last_layer_score_matrix(&projectors, &centers.view());
    let m1 = 40; // first-layer block of the truth columns
    for p in 0..5 {
        let own = scores[(p, m1 + p)];
        for q in 0..5 {
            if q == p {
                continue;
            }
            let other = scores[(p, m1 + q)];
            assert!(
                own < 0.8 * other,
                "no gap: S[{p}][own]={own} vs S[{p}][{q}]={other}"
            );
        }
    }
}

/// First-layer scores separate true first-layer weights from last-layer ones
/// on five independent two-layer teachers.
#[test]
fn first_layer_scores_separate_layers() {
    for seed in 0..5 {
        let arch = Architecture::new(50, 2, 10, 110, 1.0).unwrap();
        let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, 60 + seed).unwrap();
        let truth = normalized_truth(&teacher);
        let centers = truth.t().to_owned();
        let law = SamplingLaw::uniform_sphere(50, 20.0 * 50f64.sqrt());
        let mut rng = stage_rng(seed, "sep");
        let batch = HessianBatch::sample_analytic(&teacher, &law, 200, &mut rng).unwrap();
        let scores = assignment::first_layer_scores(&batch, &centers.view()).unwrap();
        let min_first = scores[..100].iter().cloned().fold(f64::INFINITY, f64::min);
        let max_last = scores[100..].iter().cloned().fold(0.0f64, f64::max);
        assert!(
            min_first > max_last,
            "seed {seed}: first-layer scores overlap last layer ({min_first} vs {max_last})"
        );
    }
}

/// The output-slot hints recover a known shuffle of the last layer on five
/// seeded three-layer teachers.
#[test]
fn permutation_hint_recovers_output_order() {
    for seed in 0..5 {
        let arch = Architecture::new(30, 3, 5, 45, 1.0).unwrap();
        let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, 80 + seed).unwrap();
        let m = teacher.total_neurons();
        let widths = teacher.widths();
        let truth = normalized_truth(&teacher);
        // Shuffle the last-layer columns by a known permutation.
        let mut order: Vec<usize> = (0..m).collect();
        let shuffle = [3usize, 0, 4, 1, 2];
        let base = widths[1] + widths[2];
        for (j, &s) in shuffle.iter().enumerate() {
            order[base + j] = base + s;
        }
        let mut centers = Array2::<f64>::zeros((m, 30));
        for (r, &src) in order.iter().enumerate() {
            centers.row_mut(r).assign(&truth.column(src));
        }
        let law = SamplingLaw::uniform_sphere(30, 0.01);
        let mut rng = stage_rng(seed, "hint");
        let batch =
            HessianBatch::sample_analytic(&teacher, &law, 5 * m.div_ceil(5), &mut rng).unwrap();
        let pops = vec![1usize; m];
        let exclude: Vec<usize> = (0..widths[1]).collect();
        let (selected, slots, _) =
            assignment::detect_last_layer(&batch, &centers.view(), &pops, m, 5, &exclude).unwrap();
        let expected: Vec<usize> = (base..base + 5).collect();
        assert_eq!(selected, expected, "seed {seed}: wrong last-layer set");
        assert_eq!(slots, shuffle.to_vec(), "seed {seed}: wrong slot hints");
    }
}

/// Forward evaluations are Lipschitz with constant prod ||W_k|| for tanh.
#[test]
fn forward_lipschitz_sanity() {
    let mut rng = stage_rng(53, "lipschitz-fwd");
    let teacher = NetworkParams::sample(12, &[8, 5, 3], Activation::Tanh, &mut rng).unwrap();
    let bound: f64 = (0..3)
        .map(|l| {
            let w = teacher.weight(l);
            // spectral norm via largest singular value of a small matrix
            let gram = w.t().dot(w);
            let (vals, _) = ndarray_linalg::Eigh::eigh(&gram, ndarray_linalg::UPLO::Lower).unwrap();
            vals.iter().cloned().fold(0.0f64, f64::max).sqrt()
        })
        .product();
    for _ in 0..200 {
        let a = entangle::derivatives::sample_points(
            &SamplingLaw::gaussian(12, 1.0),
            1,
            &mut rng,
        )
        .unwrap()
        .row(0)
        .to_owned();
        let b = entangle::derivatives::sample_points(
            &SamplingLaw::gaussian(12, 1.0),
            1,
            &mut rng,
        )
        .unwrap()
        .row(0)
        .to_owned();
        let fa = teacher.eval(&a.view()).unwrap();
        let fb = teacher.eval(&b.view()).unwrap();
        let lhs = (&fa - &fb).mapv(|v| v * v).sum().sqrt();
        let rhs = bound * (&a - &b).mapv(|v| v * v).sum().sqrt();
        assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
    }
}

/// A tiny end-to-end run with completion: the assembled pipeline holds
/// together and produces finite metrics on a small pyramidal teacher.
#[test]
fn small_full_pipeline_smoke() {
    let arch = Architecture::new(16, 2, 4, 12, 1.0).unwrap();
    let mut cfg = PipelineConfig::desk(arch, 3);
    cfg.hessian_mode = HessianMode::Analytic;
    cfg.n_restarts = Some(300);
    cfg.power_steps = 1500;
    cfg.n_f = 2000;
    cfg.completion_steps = 4000;
    cfg.completion_eval_every = 2000;
    cfg.n_test = 5000;
    let (report, artifacts) = harness::run_pipeline(&cfg).unwrap();
    assert!(report.recov >= 0.9, "recov {}", report.recov);
    assert_eq!(report.false_pos, 0.0);
    let comp = report.completion.expect("completion ran");
    assert!(comp.mse.is_finite() && comp.mse < 0.5, "mse {}", comp.mse);
    assert!(comp.monotone_fraction >= 0.99);
    let (_, params, _) = artifacts.completion.as_ref().unwrap();
    assert_eq!(params.dim(), 2 * 12 + 8);
}

/// Shared stencil cache: one fd location answers all outputs from one batch
/// of oracle rows, and the training stage reuses the same teacher oracle.
#[test]
fn query_accounting_tiny_case() {
    let arch = Architecture::new(5, 2, 2, 5, 1.0).unwrap();
    let mut cfg = PipelineConfig::desk(arch, 1);
    cfg.n_h = Some(4);
    cfg.n_restarts = Some(40);
    cfg.power_steps = 200;
    cfg.first_layer_hessians = 3;
    cfg.n_f = 17;
    cfg.completion_steps = 10;
    cfg.completion_eval_every = 10;
    cfg.n_test = 50;
    let (report, _) = harness::run_pipeline(&cfg).unwrap();
    // context: 4 locations, first-layer detector: 3, training: 17 rows.
    let per_loc = 2 * 5 * 5 + 1;
    assert_eq!(report.query_count, (4 + 3) * per_loc as u64 + 17);
    assert_eq!(report.query_count, harness::expected_query_count(&cfg));
}

/// Sample-network train sets are reproducible and carry teacher outputs.
#[test]
fn train_set_reproducible() {
    let mut rng = stage_rng(71, "trainset");
    let teacher = NetworkParams::sample(6, &[4, 2], Activation::Tanh, &mut rng).unwrap();
    let mut r1 = stage_rng(5, "ts");
    let mut r2 = stage_rng(5, "ts");
    let a = TrainSet::sample(&teacher, 50, &mut r1);
    let b = TrainSet::sample(&teacher, 50, &mut r2);
    assert_eq!(a.x, b.x);
    assert_eq!(a.y, b.y);
    for i in 0..50 {
        let y = teacher.eval(&a.x.row(i)).unwrap();
        for j in 0..2 {
            assert_eq!(y[j].to_bits(), a.y[(i, j)].to_bits());
        }
    }
}

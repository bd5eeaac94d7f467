// calibration: one recovery-figures cell, smallest (L=2, c=0.5, m=200)
use entangle::harness::{self, Scale};
use std::time::Instant;

fn main() {
    let t = Instant::now();
    let cfg = harness::recovery_figures_config(2, 0.5, 200, 1000, Scale::Desk).unwrap();
    eprintln!("n_h={} restarts={}", cfg.resolved_n_h(), cfg.resolved_restarts());
    let (report, arts) = harness::run_pipeline(&cfg).unwrap();
    eprintln!(
        "recov={} fp={} dist={:.3e} gap={:.2} accepted={}/{} queries={}",
        report.recov, report.false_pos, report.subspace_distance, report.singular_gap,
        report.accepted_candidates, report.total_candidates, report.query_count
    );
    eprintln!(
        "timings: ctx={:.1}s rec={:.1}s  total={:.1}s",
        report.timings.context_s, report.timings.recovery_s, t.elapsed().as_secs_f64()
    );
    let iters = &arts.candidates.iterations;
    let mut sorted = iters.clone();
    sorted.sort_unstable();
    eprintln!(
        "iters: p50={} p90={} p99={} max={}",
        sorted[sorted.len()/2], sorted[sorted.len()*9/10], sorted[sorted.len()*99/100], sorted[sorted.len()-1]
    );
}

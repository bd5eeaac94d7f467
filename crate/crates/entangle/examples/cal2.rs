// calibration: hardest recovery-figures cell (L=3, c=0.5, m=400)
use entangle::harness::{self, Scale};
use std::time::Instant;

fn main() {
    let t = Instant::now();
    let cfg = harness::recovery_figures_config(3, 0.5, 400, 1001, Scale::Desk).unwrap();
    eprintln!("n_h={} restarts={}", cfg.resolved_n_h(), cfg.resolved_restarts());
    let (report, arts) = harness::run_pipeline(&cfg).unwrap();
    eprintln!(
        "recov={} fp={} dist={:.3e} gap={:.2} accepted={}/{}",
        report.recov, report.false_pos, report.subspace_distance, report.singular_gap,
        report.accepted_candidates, report.total_candidates
    );
    eprintln!(
        "timings: ctx={:.1}s rec={:.1}s total={:.1}s",
        report.timings.context_s, report.timings.recovery_s, t.elapsed().as_secs_f64()
    );
    let mut sorted = arts.candidates.iterations.clone();
    sorted.sort_unstable();
    eprintln!("iters: p50={} p99={} max={}", sorted[sorted.len()/2], sorted[sorted.len()*99/100], sorted[sorted.len()-1]);
}

// calibration: criterion-6 style completion with exact entangled weights
use entangle::completion::{self, CompletionProblem, FitConfig, TrainSet};
use entangle::net::{Activation, Architecture, NetworkParams};
use ndarray::{Array1, Array2};
use std::time::Instant;

fn main() {
    let arch = Architecture::new(50, 3, 10, 75, 0.6).unwrap();
    eprintln!("widths = {:?}", arch.layer_widths().unwrap());
    let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, 42).unwrap();
    let x0 = Array1::zeros(50);
    let ew = teacher.entangled_weights(&x0.view()).unwrap();
    let v_norm: Vec<Array2<f64>> = ew.mats.iter().map(|v| {
        let mut out = v.clone();
        for mut col in out.columns_mut() { let n = col.dot(&col).sqrt(); col /= n; }
        out
    }).collect();
    let problem = CompletionProblem::new(v_norm, (0..10).collect(), Activation::Tanh).unwrap();
    let mut rng = entangle::stage_rng(42, "cal3-train");
    let data = TrainSet::sample(&teacher, 10_000, &mut rng);
    let mut rng_t = entangle::stage_rng(42, "cal3-test");
    let test = TrainSet::sample(&teacher, 100_000, &mut rng_t);
    let cfg = FitConfig { max_steps: 50_000, eval_every: 1000, ..FitConfig::default() };
    let t = Instant::now();
    let (params, hist) = completion::fit(&problem, &data, &cfg, |step, p| {
        let pred = completion::completed_forward_batch(&problem, p, &test.x.view());
        let mse = completion::relative_mse(&pred.view(), &test.y.view());
        let e_inf = completion::relative_sup_error(&pred.view(), &test.y.view());
        eprintln!("step {step}: mse={mse:.3e} e_inf={e_inf:.3e} ({:.1}s)", t.elapsed().as_secs_f64());
        vec![mse, e_inf]
    }).unwrap();
    let tau_err: Vec<f64> = (0..3).map(|l| {
        let diff = (&params.shifts[l] - teacher.shift(l)).mapv(|v| v*v).sum();
        diff / teacher.shift(l).mapv(|v| v*v).sum()
    }).collect();
    eprintln!("steps_run={} final_loss={:.3e} monotone={:.4} e_theta={tau_err:?} total={:.1}s",
        hist.steps_run, hist.rows.last().unwrap().loss, hist.monotone_fraction, t.elapsed().as_secs_f64());
}

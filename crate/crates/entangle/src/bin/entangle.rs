//! Command-line front end: generate teachers, run the identification
//! pipeline, reproduce the reference experiments, and inspect reports.

use clap::{Parser, Subcommand};
use entangle::derivatives::SamplingLaw;
use entangle::harness::{self, Experiment, HessianMode, PipelineConfig, Scale};
use entangle::net::{Activation, Architecture, NetworkParams};
use entangle::theory;
use ndarray::Array1;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "entangle", version, about = "Identify feedforward tanh networks from input-output queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ArchArgs {
    /// Input dimension D.
    #[arg(long, short = 'd')]
    input_dim: usize,
    /// Number of layers L.
    #[arg(long, short = 'l')]
    depth: usize,
    /// Output width m_L.
    #[arg(long)]
    m_l: usize,
    /// Total neuron count m.
    #[arg(long, short = 'm')]
    neurons: usize,
    /// Contraction factor c in (0, 1].
    #[arg(long, short = 'c', default_value_t = 1.0)]
    contraction: f64,
}

impl ArchArgs {
    fn build(&self) -> entangle::Result<Architecture> {
        Architecture::new(
            self.input_dim,
            self.depth,
            self.m_l,
            self.neurons,
            self.contraction,
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a random teacher network and write it as JSON.
    GenNet {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Run the identification pipeline on a sampled or supplied teacher.
    Run {
        /// JSON pipeline config file; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        arch: Option<ArchArgs>,
        /// Teacher network JSON (instead of sampling one).
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use desk-scale defaults instead of the full reference values.
        #[arg(long)]
        desk: bool,
        /// analytic or fd Hessians.
        #[arg(long)]
        hessians: Option<String>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        skip_assignment: bool,
        #[arg(long)]
        skip_completion: bool,
        /// Assign layers from teacher knowledge (required for L > 3).
        #[arg(long)]
        oracle_assignment: bool,
        /// Directory for the report and stage artifacts.
        #[arg(long, short = 'o', default_value = "entangle-out")]
        out: PathBuf,
    },
    /// Re-run a named reference experiment and write its metric CSVs.
    Reproduce {
        /// table3 | recovery-figures | gd-comparison
        #[arg(long, short = 'e')]
        experiment: String,
        /// desk (default) or full.
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, short = 'o', default_value = "entangle-out")]
        out: PathBuf,
    },
    /// Pretty-print a report JSON produced by `run`.
    Inspect { report: PathBuf },
    /// Evaluate the supporting theory numerically on a sampled teacher.
    TheoryCheck {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        radius: f64,
        /// Monte-Carlo locations for the spectrum estimate.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ENTANGLE_THREADS") {
        match threads.parse::<usize>() {
            Ok(t) => entangle::configure_pool(Some(t)),
            Err(_) => eprintln!("warning: ignoring non-numeric ENTANGLE_THREADS"),
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> entangle::Result<()> {
    match cli.command {
        Command::GenNet { arch, seed, out } => {
            let arch = arch.build()?;
            let net = NetworkParams::sample_from_arch(&arch, Activation::Tanh, seed)?;
            let text = serde_json::to_string_pretty(&net.to_json())?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Run {
            config,
            arch,
            net,
            seed,
            desk,
            hessians,
            radius,
            restarts,
            skip_assignment,
            skip_completion,
            oracle_assignment,
            out,
        } => {
            let mut cfg = match (config, arch) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(path)?;
                    serde_json::from_str::<PipelineConfig>(&text)?
                }
                (None, Some(arch)) => {
                    let arch = arch.build()?;
                    if desk {
                        PipelineConfig::desk(arch, seed)
                    } else {
                        PipelineConfig::new(arch, seed)
                    }
                }
                (None, None) => {
                    return Err(entangle::Error::InvalidConfig(
                        "run needs --config or the architecture flags".into(),
                    ))
                }
            };
            cfg.seed = seed;
            if let Some(mode) = hessians {
                cfg.hessian_mode = match mode.as_str() {
                    "analytic" => HessianMode::Analytic,
                    "fd" => HessianMode::Fd,
                    other => {
                        return Err(entangle::Error::InvalidConfig(format!(
                            "unknown hessian mode `{other}`"
                        )))
                    }
                };
            }
            if let Some(r) = radius {
                cfg.radius = r;
            }
            if let Some(n) = restarts {
                cfg.n_restarts = Some(n);
            }
            if skip_assignment {
                cfg.run_assignment = false;
                cfg.run_completion = false;
            }
            if skip_completion {
                cfg.run_completion = false;
            }
            cfg.oracle_assignment = oracle_assignment;

            std::fs::create_dir_all(&out)?;
            let (report, artifacts) = match net {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let teacher = NetworkParams::from_json(&serde_json::from_str(&text)?)?;
                    harness::run_pipeline_with_teacher(&cfg, teacher)
                }
                None => harness::run_pipeline(&cfg),
            }?;

            std::fs::write(
                out.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            std::fs::write(
                out.join("config.json"),
                serde_json::to_string_pretty(&cfg)?,
            )?;
            artifacts
                .projector
                .export_json(std::fs::File::create(out.join("projector.json"))?)?;
            artifacts
                .candidates
                .export_csv(std::fs::File::create(out.join("candidates.csv"))?)?;
            if let Some(asg) = &artifacts.assignment {
                asg.export_json(std::fs::File::create(out.join("assignment.json"))?)?;
            }
            if let Some((problem, params, history)) = &artifacts.completion {
                let mut names = vec!["mse".to_string(), "e_inf".to_string()];
                for l in 0..artifacts.teacher.depth() {
                    names.push(format!("e_theta_{}", l + 1));
                }
                history.export_csv(&names, std::fs::File::create(out.join("completion.csv"))?)?;
                let rebuilt = problem.to_network(params)?;
                std::fs::write(
                    out.join("completed_net.json"),
                    serde_json::to_string_pretty(&rebuilt.to_json())?,
                )?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Reproduce {
            experiment,
            scale,
            out,
        } => {
            let exp: Experiment = experiment.parse()?;
            let scale = match scale.as_str() {
                "desk" => Scale::Desk,
                "full" => Scale::Full,
                other => {
                    return Err(entangle::Error::InvalidConfig(format!(
                        "unknown scale `{other}`"
                    )))
                }
            };
            let summary = harness::reproduce(exp, scale, &out)?;
            for cell in &summary.cells {
                println!(
                    "{}: {}",
                    cell.label,
                    if cell.passed { "pass" } else { "FAIL" }
                );
            }
            println!(
                "overall: {}",
                if summary.all_passed { "pass" } else { "FAIL" }
            );
            Ok(())
        }
        Command::Inspect { report } => {
            let text = std::fs::read_to_string(report)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::TheoryCheck {
            arch,
            seed,
            radius,
            samples,
            out,
        } => {
            let arch = arch.build()?;
            let teacher = NetworkParams::sample_from_arch(&arch, Activation::Tanh, seed)?;
            let law = SamplingLaw::uniform_sphere(arch.input_dim, radius);
            let constants = theory::theorem_constants(&teacher, &law, 1e-3, samples, seed)?;
            let x0 = Array1::zeros(arch.input_dim);
            let ew = teacher.entangled_weights(&x0.view())?;
            let frame = theory::frame_constant(&ew.normalized_columns().view())?;
            let mut rng = entangle::stage_rng(seed, "theory-pairs");
            let pairs: Vec<(Array1<f64>, Array1<f64>)> = (0..200)
                .map(|_| {
                    let a = entangle::derivatives::sample_points(&law, 1, &mut rng).unwrap();
                    let b = entangle::derivatives::sample_points(&law, 1, &mut rng).unwrap();
                    (a.row(0).to_owned(), b.row(0).to_owned())
                })
                .collect();
            let lipschitz = theory::lipschitz_bound_check(&teacher, &pairs)?;
            let doc = serde_json::json!({
                "theorem_constants": constants,
                "frame": frame,
                "lipschitz": lipschitz,
            });
            let text = serde_json::to_string_pretty(&doc)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

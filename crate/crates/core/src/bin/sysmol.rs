use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sysmol::experiment::{ExperimentConfig, Pipeline};
use sysmol::vexec::enumerate_gpu_patterns;
use sysmol::{selftest, Error};

/// Train, pack, simulate and cost channel-wise mixed-precision models.
#[derive(Parser)]
#[command(name = "sysmol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-instruction traces.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct ModelArg {
    /// Packed model to read instead of `<out>/model.sysm`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write the report, trained state and packed model.
    Train(Common),
    /// Re-pack a trained state into the model file.
    Pack(Common),
    /// Simulated inference on the test split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Cost report against the uniform 8-bit twin.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Train, infer and bench in one go.
    Run(Common),
    /// Print the GPU precision-pattern table.
    Patterns,
    /// Exhaustive MAC oracles.
    Selftest,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ORACLE: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

enum Failure {
    Pipeline(&'static str, Error),
    Oracle(String),
}

fn pipeline(c: &Common) -> Result<Pipeline, Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| Failure::Pipeline("config", e))?;
    if let Some(seed) = c.seed {
        cfg.experiment.seed = seed;
    }
    Ok(Pipeline::new(cfg, c.out.clone(), c.trace))
}

fn stage<T>(name: &'static str, r: sysmol::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Pipeline(name, e))
}

fn infer(p: &Pipeline, model: Option<&std::path::Path>) -> Result<(), Failure> {
    let r = stage("infer", p.infer(model))?;
    println!("infer: accuracy {:.4} on {} samples, {} vmacs", r.accuracy, r.samples, r.counts.vmac_total());
    if !r.counts_match {
        return Err(Failure::Oracle("simulated instruction counts differ from the closed form".into()));
    }
    Ok(())
}

fn bench(p: &Pipeline, model: Option<&std::path::Path>) -> Result<(), Failure> {
    let r = stage("bench", p.bench(model))?;
    println!("bench: bpp {:.3}, speedup {:.3} vs uniform 8-bit", r.bpp, r.speedup);
    Ok(())
}

fn train(p: &Pipeline) -> Result<(), Failure> {
    let r = stage("train", p.train())?;
    println!("train: accuracy {:.4} (float baseline {:.4}), bpp {:.3}", r.final_accuracy, r.baseline_accuracy, r.bpp);
    Ok(())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(c) => train(&pipeline(&c)?),
        Command::Pack(c) => {
            let p = pipeline(&c)?;
            let m = stage("pack", p.pack())?;
            println!("pack: {} layers -> {}", m.layers.len(), p.path(sysmol::experiment::MODEL_FILE).display());
            Ok(())
        }
        Command::Infer { common, model } => infer(&pipeline(&common)?, model.model.as_deref()),
        Command::Bench { common, model } => bench(&pipeline(&common)?, model.model.as_deref()),
        Command::Run(c) => {
            let p = pipeline(&c)?;
            train(&p)?;
            infer(&p, None)?;
            bench(&p, None)
        }
        Command::Patterns => {
            println!("pn\tpattern\tcapacity");
            for (i, p) in enumerate_gpu_patterns().iter().enumerate() {
                println!("{i}\t{p}\t{}", p.capacity());
            }
            Ok(())
        }
        Command::Selftest => {
            let r = selftest::run();
            for s in &r.suites {
                println!("{}: {} cases, {} mismatches", s.name, s.cases, s.mismatches);
            }
            if r.passed() {
                Ok(())
            } else {
                Err(Failure::Oracle(format!("{} mismatches", r.mismatches())))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Oracle(msg)) => {
            eprintln!("oracle mismatch: {msg}");
            ExitCode::from(EXIT_ORACLE)
        }
        Err(Failure::Pipeline(stage, e)) => {
            eprintln!("{stage}: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::PrecisionNotInSet(_) | Error::InvalidPrecision(_) => EXIT_CONFIG,
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => 1,
            })
        }
    }
}

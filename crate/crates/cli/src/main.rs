//! `feddp`: run federated experiments, ablations, inversion attacks and
//! privacy calibration from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 training diverged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use feddp::attack::{run_trials, AttackError};
use feddp::dp::{DpConfig, Mechanism};
use feddp::experiment::{
    ablate, attack_setup, grid_csv, run_to_dir, write_attack_outputs, write_file, ExperimentConfig,
    ExperimentError,
};
use feddp::learn::ModelKind;

#[derive(Parser)]
#[command(name = "feddp", version, about = "Federated learning with differentially private client updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    LinearPixel,
    MicroDualBranch,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::LinearPixel => ModelKind::LinearPixel,
            ModelArg::MicroDualBranch => ModelKind::MicroDualBranch,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one federation; writes metrics.csv, model.bin and config.json.
    Run {
        config: PathBuf,
        /// Use the long profile (150 rounds).
        #[arg(long)]
        paper_scale: bool,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Sweep noise multiplier and clip bound; writes grid.csv.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
        #[arg(long = "clips", value_delimiter = ',', required = true)]
        clips: Vec<f64>,
        /// Each cell reports the median over this many root seeds.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Gradient-inversion trials against single-sample updates.
    Attack {
        config: PathBuf,
        /// Attack only privatized updates.
        #[arg(long, conflicts_with = "no_dp")]
        with_dp: bool,
        /// Attack only raw updates.
        #[arg(long)]
        no_dp: bool,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Optimizer iterations per reconstruction.
        #[arg(long, default_value_t = 2000)]
        budget: usize,
        #[arg(long, value_enum, default_value = "linear-pixel")]
        model: ModelArg,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the privacy figures for a clip bound and noise multiplier.
    Calibrate {
        #[arg(long)]
        clip_c: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = feddp::dp::DEFAULT_DELTA)]
        delta: f64,
    },
}

enum Failure {
    Usage(String),
    Diverged(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_divergence() {
            Failure::Diverged(e.to_string())
        } else if matches!(e, ExperimentError::Config(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load(path: &Path, output_dir: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            paper_scale,
            output_dir,
        } => {
            let mut cfg = load(&config, output_dir)?;
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            let art = run_to_dir(&cfg)?;
            if let Some(last) = art.outcome.final_record() {
                println!(
                    "round {} loss {:.4} dice {:.4} jaccard {:.4} acc {:.4}",
                    last.round, last.loss, last.dice, last.jaccard, last.acc
                );
            }
            println!("wrote {}", art.metrics.display());
        }
        Command::Ablate {
            config,
            sigmas,
            clips,
            seeds,
            output_dir,
        } => {
            let cfg = load(&config, output_dir)?;
            let cells = ablate(&cfg, &sigmas, &clips, seeds).map_err(|e| Failure::Usage(e.to_string()))?;
            let path = cfg.output_dir.join("grid.csv");
            write_file(&path, &grid_csv(&cells)?)?;
            for c in &cells {
                println!("sigma {} clip_c {} dice {:.4} status {}", c.sigma, c.clip_c, c.dice, c.status);
            }
            println!("wrote {}", path.display());
        }
        Command::Attack {
            config,
            with_dp,
            no_dp,
            trials,
            budget,
            model,
            output_dir,
        } => {
            let cfg = load(&config, output_dir)?;
            let modes: &[bool] = match (with_dp, no_dp) {
                (true, _) => &[true],
                (_, true) => &[false],
                _ => &[false, true],
            };
            let setup = attack_setup(&cfg, model.into(), trials, budget);
            let outputs = run_trials(&setup, modes)?;
            write_attack_outputs(&cfg.output_dir, &setup, &outputs)?;
            let summary = feddp::experiment::attack_summary_csv(&outputs)?;
            print!("{}", String::from_utf8_lossy(&summary));
        }
        Command::Calibrate { clip_c, sigma, delta } => {
            let cfg = DpConfig {
                mechanism: Mechanism::Gaussian,
                sigma,
                clip_c,
                delta,
                ..DpConfig::default()
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let r = cfg.report();
            println!("epsilon_paper={:?}", r.epsilon_linear);
            println!("epsilon_classic={:?}", r.epsilon_classic);
            println!("noise_std={:?}", r.noise_std);
            println!("sensitivity={:?}", r.sensitivity);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

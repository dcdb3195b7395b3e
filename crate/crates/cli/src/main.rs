use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unlearn_cli::commands;
use unlearn_cli::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};
use unlearn_cli::{ExperimentConfig, Layout, SweepAxis};

#[derive(Parser, Debug)]
#[command(name = "unlearn-lab", version, about = "Data unlearning experiments on small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON); built-in defaults when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Restricts unlearn/evaluate to one method.
    #[arg(long, global = true, value_name = "NAME")]
    method: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the remaining and unlearning sets with a manifest.
    GenData,
    /// Trains the denoiser on the full dataset.
    Pretrain,
    /// Fine-tunes the pretrained model with each configured method.
    Unlearn,
    /// Computes metrics for the pretrained and unlearned models.
    Evaluate,
    /// Runs the closed-form oracle checks; exit status 2 on any failure.
    VerifyOracle {
        /// Multiplies every importance weight by this factor (harness self-test).
        #[arg(long, value_name = "F")]
        fault_scale: Option<f64>,
    },
    /// Runs ReTrack across one ablation axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    K,
    Lambda,
    Regularizer,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::K => SweepAxis::K,
            Axis::Lambda => SweepAxis::Lambda,
            Axis::Regularizer => SweepAxis::Regularizer,
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let method = cli.method.as_deref().map(commands::parse_method).transpose()?;
    let config = base.with_overrides(cli.seed, method)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => commands::gen_data(&config, &layout).map(drop),
        Command::Pretrain => commands::pretrain(&config, &layout).map(drop),
        Command::Unlearn => commands::unlearn(&config, &layout).map(drop),
        Command::Evaluate => {
            let reports = commands::evaluate(&config, &layout)?;
            for r in &reports {
                println!(
                    "{:<12} frequency {:.4} nll_unlearn {:.4} nll_remain {:.4} recon {:.4} oracle_distance {:.4}",
                    r.method, r.frequency, r.nll_unlearn, r.nll_remain, r.recon_similarity, r.oracle_distance
                );
            }
            Ok(())
        }
        Command::VerifyOracle { fault_scale } => {
            let report = commands::verify_oracle(&config, &layout, fault_scale)?;
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                Err(CliError::Verification(failed.join(", ")))
            }
        }
        Command::Sweep { axis } => commands::sweep(&config, &layout, axis.into()).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK } as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

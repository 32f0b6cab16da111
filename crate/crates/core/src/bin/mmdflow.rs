use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmdflow::experiment::{self, Overrides, EXIT_CONFIG};

/// Build, verify and sweep residual flows that transport particle clouds in MMD.
#[derive(Debug, Parser)]
#[command(name = "mmdflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Directory for output files (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a flow and write the per-block report, summary, flow and clouds.
    Build { config: PathBuf },
    /// Run the bound checks, Taylor fit, inversion round trips and certification.
    Verify { config: PathBuf },
    /// Build fresh flows under both schedules for each target ratio.
    Sweep {
        config: PathBuf,
        /// Strictly decreasing ratios in (0, 1), e.g. `1e-1,1e-2,1e-3`.
        #[arg(long, required = true)]
        deltas: String,
    },
}

fn run(cli: Cli) -> mmdflow::Result<i32> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Build { config } => experiment::cmd_build(&experiment::load_config(config, &overrides)?),
        Command::Verify { config } => experiment::cmd_verify(&experiment::load_config(config, &overrides)?),
        Command::Sweep { config, deltas } => {
            let deltas = experiment::parse_deltas(&deltas)?;
            experiment::cmd_sweep(&experiment::load_config(config, &overrides)?, &deltas)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiment::exit_code(&e) as u8)
        }
    }
}

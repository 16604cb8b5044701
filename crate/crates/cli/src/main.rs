use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use neurotrain_cli::{cmd_campaign, cmd_report, cmd_run, RunArgs, EXIT_ERROR, EXIT_INTERRUPTED};

#[derive(Parser)]
#[command(name = "neurotrain", version, about = "Train and benchmark spiking neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single custom experiment (config mode "custom").
    Run(ExperimentArgs),
    /// Run every trainer x model x dataset cell (config mode "campaign").
    Campaign {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Maximum concurrent experiments; overrides the config.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Print a results file as a matrix and write it as CSV beside it.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "test_acc")]
        metric: String,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: `out` from the config, else results/ beside it].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root [default: `data_dir` from the config, else $NEUROTRAIN_DATA, else ./data].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

static CANCEL: AtomicBool = AtomicBool::new(false);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(EXIT_INTERRUPTED);
        }
        eprintln!("interrupt: finishing up and writing completed records (press again to abort)");
    });
    let result = match cli.command {
        Command::Run(a) => cmd_run(
            &RunArgs {
                config: a.config,
                out: a.out,
                data_dir: a.data_dir,
                parallelism: None,
            },
            &CANCEL,
        ),
        Command::Campaign { common, parallelism } => cmd_campaign(
            &RunArgs {
                config: common.config,
                out: common.out,
                data_dir: common.data_dir,
                parallelism,
            },
            &CANCEL,
        ),
        Command::Report { results, metric } => cmd_report(&results, &metric),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}

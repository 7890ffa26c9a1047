use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metaland::runner::{self, plot, ExperimentConfig, RunnerError, TrainOptions};

#[derive(Parser)]
#[command(name = "metaland", version, about = "MAML meta-learning lab with landscape metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with per-epoch evaluation, checkpoints and metric logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Continue from the last checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and print its metric record as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config in the run's manifest.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Plot metric fields against the epoch as SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        fields: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// First field on the left axis, second on the right.
        #[arg(long)]
        dual_axis: bool,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, RunnerError> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Train { config, out, jobs, resume, quiet } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let manifest = runner::run_train(&cfg, &out, &TrainOptions { resume, jobs, verbose: !quiet })?;
            eprintln!(
                "{} epochs written to {} in {:.1}s",
                manifest.checkpoints.len().saturating_sub(1),
                out.display(),
                manifest.timings.total_seconds
            );
        }
        Command::Eval { checkpoint, config, jobs } => {
            let cfg = config.as_ref().map(load_config).transpose()?;
            let record = runner::run_eval(&checkpoint, cfg.as_ref(), jobs)?;
            println!("{}", record.to_json_line());
        }
        Command::Plot { metrics, fields, out, dual_axis } => {
            let n = plot::run_plot(&metrics, &fields, &out, dual_axis)?;
            eprintln!("{n} series written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors count as config errors; 2 is reserved for numeric failures
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
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

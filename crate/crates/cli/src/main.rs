use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xlmimo_cli::config::SweepAxis;
use xlmimo_cli::{
    cmd_evaluate, cmd_report, cmd_sweep, cmd_topology, cmd_train, load_config, CliError, Options,
};

#[derive(Parser)]
#[command(
    name = "xlmimo",
    version,
    about = "Near-field XL-MIMO cell-free experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed(s) replacing the config's seed list; repeatable.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "XLMIMO_OUT", default_value = "out")]
    out: PathBuf,

    /// Independent jobs (seeds, sweep points) run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Checkpoint file or directory (resume for `train`, policies for `evaluate`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the scene and its field-region report.
    Topology,
    /// Train learned methods, writing checkpoints and curves.
    Train {
        /// as, pc or dpc; all learned methods of the config when omitted.
        #[arg(long)]
        task: Option<String>,
    },
    /// Evaluate every configured method on the held-out drops.
    Evaluate,
    /// Train and evaluate across values of one topology axis.
    Sweep {
        #[arg(long)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Regenerate summary.json from results.csv.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = Options {
        out: cli.out,
        jobs: cli.jobs.max(1),
        checkpoint: cli.checkpoint,
        quiet: cli.quiet,
    };
    let config = || -> Result<_, CliError> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| CliError::config("--config", "a configuration file is required"))?;
        load_config(path, &cli.seeds)
    };
    match cli.command {
        Command::Topology => {
            let report = cmd_topology(&config()?, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train { task } => {
            let r = cmd_train(&config()?, &opts, task.as_deref())?;
            for p in r.checkpoints.iter().chain(&r.curves) {
                println!("{}", p.display());
            }
            if let Some(s) = &r.baseline_summary {
                for line in xlmimo_cli::summary::describe(s) {
                    println!("{line}");
                }
            }
        }
        Command::Evaluate => {
            let s = cmd_evaluate(&config()?, &opts)?;
            for line in xlmimo_cli::summary::describe(&s) {
                println!("{line}");
            }
        }
        Command::Sweep { axis, values } => {
            let t = cmd_sweep(&config()?, &opts, axis, values)?;
            print!(
                "{}",
                String::from_utf8_lossy(&xlmimo_cli::commands::sweep_csv(&t)?)
            );
        }
        Command::Report => {
            let cfg = match &cli.config {
                Some(_) => Some(config()?),
                None => None,
            };
            let s = cmd_report(cfg.as_ref(), &opts)?;
            for line in xlmimo_cli::summary::describe(&s) {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

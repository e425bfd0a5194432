//! Experiment harness around `xlmimo-core`: TOML configs, training and
//! evaluation runs, sweeps, and CSV/JSON emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod run;
pub mod summary;

pub use commands::{
    cmd_evaluate, cmd_report, cmd_sweep, cmd_topology, cmd_train, load_config, Options,
};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use run::{run_experiment, run_seed};

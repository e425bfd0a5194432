//! The selection and power-control tasks as multi-agent environments, their
//! baselines, the exhaustive selection oracle, and the training loop.

pub mod baselines;
pub mod power;
pub mod scenario;
pub mod selection;
pub mod train;

pub use baselines::{baseline_equal_power, baseline_lsf_selection, baseline_no_selection};
pub use power::{
    action_to_power, entities, split_budget, EntityMode, PcEnv, PcLayers, PcStep, PcTaskConfig,
};
pub use scenario::{
    derive_seed, drop_seed, eval_drop_seeds, EpisodeLog, ExperimentResult, Method, MethodRun,
    RewardMode, Scenario, SeedStream,
};
pub use selection::{
    brute_force_selection_oracle, count_assignments, decode_scores, lsf_assignment, mean_sum_se,
    AsEnv, AsStep, AsTaskConfig, EnvState, OracleResult,
};
pub use train::{Checkpoint, Episode, MarlTask, Trainer, CHECKPOINT_VERSION};

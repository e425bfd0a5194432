//! Experiment configuration: a TOML document with one table per section.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xlmimo_core::channel::ChannelConfig;
use xlmimo_core::geometry::TopologyConfig;
use xlmimo_core::marl::TrainConfig;
use xlmimo_core::signal::SignalConfig;
use xlmimo_core::tasks::{AsTaskConfig, EntityMode, Method, PcTaskConfig, RewardMode};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Antenna selection.
    #[default]
    As,
    /// Power control (single- and double-layer).
    Pc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub power_penalty: f64,
    pub entity: EntityMode,
    pub softmax_temperature: f64,
    /// Equal-power level as a fraction of `p_max`.
    pub fill_fraction: f64,
    /// Largest assignment count the exhaustive selection oracle will enumerate.
    pub oracle_cap: usize,
    /// `team` (shared sum SE) or `per_agent`.
    pub reward: RewardMode,
}

impl Default for TaskSection {
    fn default() -> Self {
        let pc = PcTaskConfig::default();
        Self {
            kind: TaskKind::As,
            power_penalty: pc.power_penalty,
            entity: pc.entity,
            softmax_temperature: pc.softmax_temperature,
            fill_fraction: 1.0,
            oracle_cap: 100_000,
            reward: pc.reward,
        }
    }
}

impl TaskSection {
    pub fn pc_config(&self) -> PcTaskConfig {
        PcTaskConfig {
            entity: self.entity,
            power_penalty: self.power_penalty,
            softmax_temperature: self.softmax_temperature,
            reward: self.reward,
        }
    }

    pub fn as_config(&self) -> AsTaskConfig {
        AsTaskConfig {
            power_penalty: self.power_penalty,
            reward: self.reward,
        }
    }
}

/// Run-length settings kept next to the learner hyperparameters in `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub episodes: u64,
    /// Episodes between evaluation points on the training curve; 0 disables.
    pub eval_every: u64,
    /// Drops per curve evaluation point.
    pub curve_eval_drops: usize,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Held-out drops of the final evaluation.
    pub eval_drops: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            episodes: 5000,
            eval_every: 0,
            curve_eval_drops: 100,
            checkpoint_every: 0,
            eval_drops: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    M,
    N,
    K,
}

impl std::str::FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "M" | "m" => Ok(SweepAxis::M),
            "N" | "n" => Ok(SweepAxis::N),
            "K" | "k" => Ok(SweepAxis::K),
            other => Err(CliError::config(
                "sweep.axis",
                format!("unknown axis `{other}` (use M, N or K)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

/// Fully parsed experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub topology: TopologyConfig,
    pub channel: ChannelConfig,
    pub signal: SignalConfig,
    pub train: TrainConfig,
    pub run: RunSection,
    pub task: TaskSection,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepSection>,
}

const TOP_LEVEL: &[&str] = &[
    "name", "topology", "channel", "signal", "train", "task", "methods", "seeds", "sweep",
];
const RUN_KEYS: &[&str] = &[
    "episodes",
    "eval_every",
    "curve_eval_drops",
    "checkpoint_every",
    "eval_drops",
];

fn section<T: serde::de::DeserializeOwned + Default>(
    table: &toml::Table,
    name: &str,
) -> CliResult<T> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(toml::Value::Table(t)) => t
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(name, e.message().to_string())),
        Some(_) => Err(CliError::config(name, "must be a table")),
    }
}

fn take_u64(t: &mut toml::Table, key: &str) -> CliResult<Option<u64>> {
    match t.remove(key) {
        None => Ok(None),
        Some(toml::Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
        Some(_) => Err(CliError::config(
            format!("train.{key}"),
            "must be a non-negative integer",
        )),
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        if let Some(k) = table.keys().find(|k| !TOP_LEVEL.contains(&k.as_str())) {
            return Err(CliError::config(k.as_str(), "unknown section or key"));
        }
        let name = match table.get("name") {
            None => "experiment".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(CliError::config("name", "must be a string")),
        };
        let mut train_table = match table.get("train") {
            None => toml::Table::new(),
            Some(toml::Value::Table(t)) => t.clone(),
            Some(_) => return Err(CliError::config("train", "must be a table")),
        };
        let mut run = RunSection::default();
        for key in RUN_KEYS {
            let v = take_u64(&mut train_table, key)?;
            if let Some(v) = v {
                match *key {
                    "episodes" => run.episodes = v,
                    "eval_every" => run.eval_every = v,
                    "curve_eval_drops" => run.curve_eval_drops = v as usize,
                    "checkpoint_every" => run.checkpoint_every = v,
                    "eval_drops" => run.eval_drops = v as usize,
                    _ => unreachable!(),
                }
            }
        }
        let train: TrainConfig = toml::Value::Table(train_table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config("train", e.message().to_string()))?;
        let methods = match table.get("methods") {
            None => vec![],
            Some(v) => v
                .clone()
                .try_into::<Vec<String>>()
                .map_err(|_| CliError::config("methods", "must be a list of method names"))?
                .iter()
                .map(|s| {
                    s.parse::<Method>()
                        .map_err(|e| CliError::config("methods", e.to_string()))
                })
                .collect::<CliResult<Vec<_>>>()?,
        };
        let seeds = match table.get("seeds") {
            None => vec![0],
            Some(v) => v.clone().try_into::<Vec<u64>>().map_err(|_| {
                CliError::config("seeds", "must be a list of non-negative integers")
            })?,
        };
        let sweep = match table.get("sweep") {
            None => None,
            Some(v) => Some(
                v.clone()
                    .try_into::<SweepSection>()
                    .map_err(|e| CliError::config("sweep", e.message().to_string()))?,
            ),
        };
        let cfg = Self {
            name,
            topology: section(&table, "topology")?,
            channel: section(&table, "channel")?,
            signal: section(&table, "signal")?,
            train,
            run,
            task: section(&table, "task")?,
            methods,
            seeds,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Parse(msg) => CliError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.topology.validate()?;
        self.channel.validate()?;
        self.signal.validate()?;
        self.train.validate()?;
        self.task.pc_config().validate()?;
        if !(self.task.fill_fraction > 0.0 && self.task.fill_fraction <= 1.0) {
            return Err(CliError::config("task.fill_fraction", "must lie in (0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        if self.run.eval_drops == 0 {
            return Err(CliError::config("train.eval_drops", "must be >= 1"));
        }
        if self.run.eval_every > 0 && self.run.curve_eval_drops == 0 {
            return Err(CliError::config(
                "train.curve_eval_drops",
                "must be >= 1 when eval_every > 0",
            ));
        }
        for m in &self.methods {
            let ok = match self.task.kind {
                TaskKind::As => matches!(
                    m,
                    Method::NoSelection | Method::LsfSelection | Method::MaddpgAs
                ),
                TaskKind::Pc => matches!(m, Method::EqualPower | Method::Maddpg | Method::DMaddpg),
            };
            if !ok {
                return Err(CliError::config(
                    "methods",
                    format!("{m} does not belong to task {:?}", self.task.kind),
                ));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() || s.values.contains(&0) {
                return Err(CliError::config(
                    "sweep.values",
                    "must be a non-empty list of positive counts",
                ));
            }
        }
        Ok(())
    }

    /// Methods to run, defaulting to every method of the task.
    pub fn methods(&self) -> Vec<Method> {
        if !self.methods.is_empty() {
            return self.methods.clone();
        }
        match self.task.kind {
            TaskKind::As => vec![Method::NoSelection, Method::LsfSelection, Method::MaddpgAs],
            TaskKind::Pc => vec![Method::EqualPower, Method::Maddpg, Method::DMaddpg],
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: usize) -> CliResult<Self> {
        let mut c = self.clone();
        match axis {
            SweepAxis::M => {
                c.topology.num_bs = value;
                c.topology.bs_positions.clear();
            }
            SweepAxis::N => {
                let (r, cols) = panel_shape(value);
                c.topology.bs_rows = r;
                c.topology.bs_cols = cols;
            }
            SweepAxis::K => c.topology.num_ue = value,
        }
        c.sweep = None;
        c.validate()?;
        Ok(c)
    }
}

/// Most square `rows x cols` factorization with `rows <= cols`.
pub fn panel_shape(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && !n.is_multiple_of(rows) {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.topology, TopologyConfig::default());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.run.eval_drops, 500);
    }

    #[test]
    fn field_paths_in_errors() {
        let e = ExperimentConfig::from_toml_str("[topology]\nwavelength = 0.0\n").unwrap_err();
        assert!(e.to_string().contains("topology.wavelength"), "{e}");
        let e = ExperimentConfig::from_toml_str("[train]\ntau = 2.0\n").unwrap_err();
        assert!(e.to_string().contains("train.tau"), "{e}");
        let e = ExperimentConfig::from_toml_str("[channel]\nbogus = 1\n").unwrap_err();
        assert!(
            e.to_string().contains("channel") && e.to_string().contains("bogus"),
            "{e}"
        );
        let e = ExperimentConfig::from_toml_str("[task]\nkind = \"as\"\n\nmethods = [\"Maddpg\"]")
            .unwrap_err();
        assert!(
            matches!(e, CliError::Config { .. }) || matches!(e, CliError::Core(_)),
            "{e}"
        );
    }

    #[test]
    fn run_keys_live_in_train_table() {
        let c = ExperimentConfig::from_toml_str(
            "[train]\nepisodes = 12\neval_drops = 7\nbatch_size = 4\nbuffer_capacity = 8\n",
        )
        .unwrap();
        assert_eq!(c.run.episodes, 12);
        assert_eq!(c.run.eval_drops, 7);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn hash_tracks_edits() {
        let a = ExperimentConfig::from_toml_str("seeds = [1]").unwrap();
        let b = ExperimentConfig::from_toml_str("seeds = [2]").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(
            a.hash(),
            ExperimentConfig::from_toml_str("seeds = [1]")
                .unwrap()
                .hash()
        );
    }

    #[test]
    fn panel_shapes() {
        assert_eq!(panel_shape(16), (4, 4));
        assert_eq!(panel_shape(8), (2, 4));
        assert_eq!(panel_shape(81), (9, 9));
        assert_eq!(panel_shape(7), (1, 7));
    }
}

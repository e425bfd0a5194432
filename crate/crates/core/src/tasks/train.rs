//! Episode loop shared by both tasks, evaluation, and checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{derive_seed, drop_seed, EpisodeLog, SeedStream};
use super::selection::EnvState;
use crate::error::{Error, Result};
use crate::marl::{AgentSpec, Maddpg, ReplayBuffer, TrainConfig, Transition};
use crate::signal::EpisodeMetrics;

/// Outcome of one single-step episode: one transition per agent group.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub reward: f64,
    pub metrics: EpisodeMetrics,
}

/// An environment whose agents are organised in one or more MADDPG groups.
///
/// `act(group, joint_obs)` returns the joint action of that group; groups are
/// queried in index order, so later groups may observe earlier decisions.
pub trait MarlTask {
    fn group_specs(&self) -> Vec<Vec<AgentSpec>>;
    #[allow(clippy::type_complexity)]
    fn run_episode(
        &mut self,
        drop_seed: u64,
        act: &mut dyn FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<Episode>;
    fn env_state(&self) -> EnvState;
    fn set_env_state(&mut self, state: EnvState);
}

/// All mutable training state; serializing it yields an exact resume point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    cfg: TrainConfig,
    task_seed: u64,
    groups: Vec<Maddpg>,
    buffers: Vec<ReplayBuffer>,
    rng: ChaCha8Rng,
    episodes: u64,
}

impl Trainer {
    pub fn new(task: &dyn MarlTask, cfg: TrainConfig, task_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(task_seed, SeedStream::Trainer) ^ cfg.seed);
        let groups = task
            .group_specs()
            .into_iter()
            .map(|specs| Maddpg::new(specs, cfg.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let buffers = (0..groups.len())
            .map(|_| ReplayBuffer::new(cfg.buffer_capacity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            task_seed,
            groups,
            buffers,
            rng,
            episodes: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn task_seed(&self) -> u64 {
        self.task_seed
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn groups(&self) -> &[Maddpg] {
        &self.groups
    }

    /// Checks that `task` has the agent layout this trainer was built for.
    pub fn check_task(&self, task: &dyn MarlTask) -> Result<()> {
        let specs = task.group_specs();
        let ours: Vec<Vec<AgentSpec>> = self.groups.iter().map(|g| g.specs().to_vec()).collect();
        if specs != ours {
            return Err(Error::Checkpoint(
                "agent layout of the checkpoint does not match the task".into(),
            ));
        }
        Ok(())
    }

    /// Runs one exploratory episode, stores its transitions and performs one
    /// update per group once the warm-up is filled. An infeasible episode is
    /// logged and skipped. On a numerical failure the networks are left as
    /// they were before the update.
    /// One exploratory episode plus one update per group. On a numerical
    /// failure the trainer and the task are left exactly as before the call.
    pub fn train_episode(&mut self, task: &mut dyn MarlTask) -> Result<EpisodeLog> {
        let rng = self.rng.clone();
        let env = task.env_state();
        let snapshot = self.groups.clone();
        let mut evicted = Vec::new();
        let result = self.train_episode_inner(task, &mut evicted);
        if let Err(Error::Numerical(_)) = &result {
            for (buf, ev) in self.buffers.iter_mut().zip(evicted).rev() {
                buf.undo_push(ev);
            }
            self.groups = snapshot;
            self.rng = rng;
            self.episodes -= 1;
            task.set_env_state(env);
        }
        result
    }

    fn train_episode_inner(
        &mut self,
        task: &mut dyn MarlTask,
        evicted: &mut Vec<Option<Transition>>,
    ) -> Result<EpisodeLog> {
        let episode = self.episodes;
        let seed = drop_seed(self.task_seed, SeedStream::TrainDrops, episode);
        let groups = &self.groups;
        let rng = &mut self.rng;
        let outcome = task.run_episode(seed, &mut |g, obs| groups[g].act_all(obs, true, rng));
        self.episodes += 1;
        let ep = match outcome {
            Ok(ep) => ep,
            Err(Error::Infeasible(msg)) => {
                return Ok(EpisodeLog {
                    episode,
                    reward: f64::NAN,
                    sum_se: f64::NAN,
                    ee: f64::NAN,
                    critic_loss: None,
                    error: Some(msg),
                })
            }
            Err(e) => return Err(e),
        };
        if ep.transitions.len() != self.groups.len() {
            return Err(Error::shape(
                "task returned the wrong number of transitions",
            ));
        }
        for (buf, mut t) in self.buffers.iter_mut().zip(ep.transitions) {
            for r in &mut t.rewards {
                *r *= self.cfg.reward_scale;
            }
            let finite = t
                .rewards
                .iter()
                .chain(&t.joint_obs)
                .chain(&t.joint_actions)
                .all(|v| v.is_finite());
            evicted.push(buf.push(t));
            if !finite {
                return Err(Error::Numerical(format!(
                    "non-finite transition in episode {episode}"
                )));
            }
        }
        let mut critic_loss = None;
        if self.buffers[0].len() >= self.cfg.warmup_len() {
            let mut losses = Vec::new();
            for (group, buf) in self.groups.iter_mut().zip(&self.buffers) {
                let batch = buf.sample(self.cfg.batch_size, &mut self.rng)?;
                let stats = group.update(&batch)?;
                losses.extend(stats.iter().map(|s| s.critic_loss));
            }
            critic_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        Ok(EpisodeLog {
            episode,
            reward: ep.reward,
            sum_se: ep.metrics.sum_se,
            ee: ep.metrics.ee,
            critic_loss,
            error: None,
        })
    }

    /// Trains for `episodes` more episodes, calling `on_episode` after each.
    pub fn train(
        &mut self,
        task: &mut dyn MarlTask,
        episodes: u64,
        mut on_episode: impl FnMut(&Trainer, &EpisodeLog) -> Result<()>,
    ) -> Result<Vec<EpisodeLog>> {
        let mut logs = Vec::with_capacity(episodes as usize);
        for _ in 0..episodes {
            let log = self.train_episode(task)?;
            on_episode(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Greedy (noise-free) policy on the given drops. The environment state is
    /// restored afterwards so evaluation never perturbs training.
    pub fn evaluate(
        &self,
        task: &mut dyn MarlTask,
        drop_seeds: &[u64],
    ) -> Result<Vec<EpisodeMetrics>> {
        self.check_task(task)?;
        let saved = task.env_state();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let groups = &self.groups;
        let result = drop_seeds
            .iter()
            .map(|&s| {
                task.run_episode(s, &mut |g, obs| groups[g].act_all(obs, false, &mut unused))
                    .map(|ep| ep.metrics)
            })
            .collect();
        task.set_env_state(saved);
        result
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON document holding a trainer and its environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Task tag, e.g. `as`, `pc`, `dpc`.
    pub task: String,
    pub config_hash: String,
    pub env_state: EnvState,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn new(task: &str, config_hash: &str, env: &dyn MarlTask, trainer: &Trainer) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            task: task.to_string(),
            config_hash: config_hash.to_string(),
            env_state: env.env_state(),
            trainer: trainer.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Restores the environment state and returns the trainer after checking
    /// that task tag and agent layout match.
    pub fn restore(self, task: &str, env: &mut dyn MarlTask) -> Result<Trainer> {
        if self.task != task {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for task `{}`, not `{task}`",
                self.task
            )));
        }
        self.trainer.check_task(env)?;
        env.set_env_state(self.env_state);
        Ok(self.trainer)
    }
}

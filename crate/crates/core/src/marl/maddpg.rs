//! Centralized-critic, decentralized-actor MADDPG.
//!
//! Actors only ever receive their own observation slice. Critics see the
//! joint observation and the joint action, and only inside [`Maddpg::update`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::buffer::Transition;
use super::mlp::{soft_update, Mlp, OutputActivation};
use super::optim::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};

/// Learning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub noise_sigma: f64,
    /// Multiplicative decay of the exploration std per update.
    pub noise_decay: f64,
    pub noise_floor: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Transitions collected before the first update; `0` means `batch_size`.
    pub warmup: usize,
    pub shared_actor: bool,
    /// Multiplier applied to rewards before they enter the replay buffer.
    pub reward_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            tau: 0.005,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            batch_size: 256,
            buffer_capacity: 100_000,
            noise_sigma: 0.2,
            noise_decay: 0.999,
            noise_floor: 0.02,
            grad_clip: 1.0,
            actor_hidden: vec![128, 64],
            critic_hidden: vec![256, 128],
            optimizer: OptimizerKind::Adam,
            warmup: 0,
            shared_actor: false,
            reward_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{name}"), msg.to_string()))
            }
        };
        field(
            "gamma",
            (0.0..=1.0).contains(&self.gamma),
            "must lie in [0, 1]",
        )?;
        field(
            "tau",
            self.tau > 0.0 && self.tau <= 1.0,
            "must lie in (0, 1]",
        )?;
        field(
            "lr_actor",
            self.lr_actor > 0.0 && self.lr_actor.is_finite(),
            "must be > 0",
        )?;
        field(
            "lr_critic",
            self.lr_critic > 0.0 && self.lr_critic.is_finite(),
            "must be > 0",
        )?;
        field("batch_size", self.batch_size >= 1, "must be >= 1")?;
        field(
            "buffer_capacity",
            self.buffer_capacity >= self.batch_size,
            "must be >= batch_size",
        )?;
        field(
            "noise_sigma",
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "must be >= 0",
        )?;
        field(
            "noise_decay",
            self.noise_decay > 0.0 && self.noise_decay <= 1.0,
            "must lie in (0, 1]",
        )?;
        field(
            "noise_floor",
            self.noise_floor >= 0.0 && self.noise_floor.is_finite(),
            "must be >= 0",
        )?;
        field("grad_clip", self.grad_clip.is_finite(), "must be finite")?;
        field(
            "reward_scale",
            self.reward_scale > 0.0 && self.reward_scale.is_finite(),
            "must be > 0",
        )?;
        field(
            "actor_hidden",
            !self.actor_hidden.contains(&0),
            "layer widths must be >= 1",
        )?;
        field(
            "critic_hidden",
            !self.critic_hidden.contains(&0),
            "layer widths must be >= 1",
        )?;
        Ok(())
    }

    pub fn warmup_len(&self) -> usize {
        if self.warmup == 0 {
            self.batch_size
        } else {
            self.warmup.max(self.batch_size)
        }
    }
}

/// Observation and action widths of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
}

/// One agent's actor, centralized critic, and their targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
}

impl AgentPolicy {
    pub fn new<R: Rng + ?Sized>(
        spec: AgentSpec,
        joint_obs: usize,
        joint_act: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut actor_dims = vec![spec.obs_dim];
        actor_dims.extend(&cfg.actor_hidden);
        actor_dims.push(spec.act_dim);
        let mut critic_dims = vec![joint_obs + joint_act];
        critic_dims.extend(&cfg.critic_hidden);
        critic_dims.push(1);
        let actor = Mlp::new(&actor_dims, OutputActivation::Tanh, rng)?;
        let critic = Mlp::new(&critic_dims, OutputActivation::Identity, rng)?;
        Ok(Self {
            actor_opt: Optimizer::new(cfg.optimizer, &actor),
            critic_opt: Optimizer::new(cfg.optimizer, &critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
        })
    }
}

/// `clip(mu(obs) + N(0, sigma^2), -1, 1)`; no randomness is consumed when `sigma == 0`.
pub fn actor_act<R: Rng + ?Sized>(
    policy: &AgentPolicy,
    obs: &[f64],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut a = policy.actor.predict(obs)?;
    if noise_sigma > 0.0 {
        for x in &mut a {
            let z: f64 = rng.sample(StandardNormal);
            *x += noise_sigma * z;
        }
    }
    for x in &mut a {
        *x = x.clamp(-1.0, 1.0);
    }
    Ok(a)
}

/// Losses measured before the parameters move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// A group of agents trained jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maddpg {
    specs: Vec<AgentSpec>,
    obs_offsets: Vec<usize>,
    act_offsets: Vec<usize>,
    policies: Vec<AgentPolicy>,
    cfg: TrainConfig,
    noise_sigma: f64,
    updates: u64,
}

impl Maddpg {
    pub fn new<R: Rng + ?Sized>(
        specs: Vec<AgentSpec>,
        cfg: TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if specs.is_empty() {
            return Err(Error::invalid("MADDPG needs at least one agent"));
        }
        if cfg.shared_actor && specs.iter().any(|s| *s != specs[0]) {
            return Err(Error::config(
                "train.shared_actor",
                "requires identical agent dimensions",
            ));
        }
        let offsets = |f: fn(&AgentSpec) -> usize| {
            let mut acc = 0;
            let mut out = Vec::with_capacity(specs.len() + 1);
            for s in &specs {
                out.push(acc);
                acc += f(s);
            }
            out.push(acc);
            out
        };
        let obs_offsets = offsets(|s| s.obs_dim);
        let act_offsets = offsets(|s| s.act_dim);
        let joint_obs = *obs_offsets.last().unwrap();
        let joint_act = *act_offsets.last().unwrap();
        let mut policies = specs
            .iter()
            .map(|&s| AgentPolicy::new(s, joint_obs, joint_act, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        if cfg.shared_actor {
            let (first, rest) = policies.split_at_mut(1);
            for p in rest {
                p.actor = first[0].actor.clone();
                p.actor_target = first[0].actor_target.clone();
            }
        }
        Ok(Self {
            noise_sigma: cfg.noise_sigma,
            specs,
            obs_offsets,
            act_offsets,
            policies,
            cfg,
            updates: 0,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[AgentSpec] {
        &self.specs
    }

    pub fn joint_obs_dim(&self) -> usize {
        *self.obs_offsets.last().unwrap()
    }

    pub fn joint_act_dim(&self) -> usize {
        *self.act_offsets.last().unwrap()
    }

    pub fn policy(&self, i: usize) -> &AgentPolicy {
        &self.policies[i]
    }

    pub fn policies(&self) -> &[AgentPolicy] {
        &self.policies
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Slice of a joint observation belonging to agent `i`.
    pub fn obs_slice<'a>(&self, joint_obs: &'a [f64], i: usize) -> &'a [f64] {
        &joint_obs[self.obs_offsets[i]..self.obs_offsets[i + 1]]
    }

    /// Local action of agent `i`; exploration uses the current noise level.
    pub fn act<R: Rng + ?Sized>(
        &self,
        i: usize,
        obs: &[f64],
        explore: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if obs.len() != self.specs[i].obs_dim {
            return Err(Error::shape(format!(
                "agent {i} expects {} observations, got {}",
                self.specs[i].obs_dim,
                obs.len()
            )));
        }
        let sigma = if explore { self.noise_sigma } else { 0.0 };
        actor_act(&self.policies[i], obs, sigma, rng)
    }

    /// Actions of every agent, each computed from its own slice of `joint_obs`.
    pub fn act_all<R: Rng + ?Sized>(
        &self,
        joint_obs: &[f64],
        explore: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if joint_obs.len() != self.joint_obs_dim() {
            return Err(Error::shape("joint observation width mismatch"));
        }
        let mut out = Vec::with_capacity(self.joint_act_dim());
        for i in 0..self.num_agents() {
            out.extend(self.act(i, self.obs_slice(joint_obs, i), explore, rng)?);
        }
        Ok(out)
    }

    fn column_batch(
        batch: &[&Transition],
        f: impl Fn(&Transition) -> &[f64],
        rows: usize,
    ) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, batch.len());
        for (b, t) in batch.iter().enumerate() {
            let v = f(t);
            if v.len() != rows {
                return Err(Error::shape(format!(
                    "transition field has width {}, expected {rows}",
                    v.len()
                )));
            }
            m.column_mut(b).copy_from_slice(v);
        }
        Ok(m)
    }

    fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
        out.rows_mut(0, top.nrows()).copy_from(top);
        out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
        out
    }

    /// One joint update on `batch`: for every agent a critic step toward the
    /// TD target and an actor step ascending its critic with only its own
    /// action re-evaluated, then Polyak averaging of all targets.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<Vec<UpdateStats>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let n_agents = self.num_agents();
        let bsz = batch.len() as f64;
        let obs = Self::column_batch(batch, |t| &t.joint_obs, self.joint_obs_dim())?;
        let act = Self::column_batch(batch, |t| &t.joint_actions, self.joint_act_dim())?;
        let rewards = Self::column_batch(batch, |t| &t.rewards, n_agents)?;
        let not_done: Vec<f64> = batch
            .iter()
            .map(|t| if t.done { 0.0 } else { 1.0 })
            .collect();
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical("non-finite reward in batch".into()));
        }

        // Bootstrapped part of the TD target, from the pre-update target networks.
        let bootstrap: Option<DMatrix<f64>> = if self.cfg.gamma > 0.0 {
            let next_obs = Self::column_batch(batch, |t| &t.joint_next_obs, self.joint_obs_dim())?;
            let mut next_act = DMatrix::zeros(self.joint_act_dim(), batch.len());
            for j in 0..n_agents {
                let o = next_obs
                    .rows(self.obs_offsets[j], self.specs[j].obs_dim)
                    .into_owned();
                let a = self.policies[j].actor_target.predict_batch(&o)?;
                next_act
                    .rows_mut(self.act_offsets[j], self.specs[j].act_dim)
                    .copy_from(&a);
            }
            let x_next = Self::stack(&next_obs, &next_act);
            let mut q_next = DMatrix::zeros(n_agents, batch.len());
            for i in 0..n_agents {
                let q = self.policies[i].critic_target.predict_batch(&x_next)?;
                q_next.row_mut(i).copy_from(&q.row(0));
            }
            Some(q_next)
        } else {
            None
        };

        let x = Self::stack(&obs, &act);
        let obs_rows = self.joint_obs_dim();
        let mut stats = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let mut y: Vec<f64> = rewards.row(i).iter().copied().collect();
            if let Some(q_next) = &bootstrap {
                for b in 0..batch.len() {
                    y[b] += self.cfg.gamma * not_done[b] * q_next[(i, b)];
                }
            }

            let policy = &mut self.policies[i];
            let (q, cache) = policy.critic.forward_batch(&x)?;
            let mut loss = 0.0;
            let mut upstream = DMatrix::zeros(1, batch.len());
            for b in 0..batch.len() {
                let err = q[(0, b)] - y[b];
                loss += err * err;
                upstream[(0, b)] = 2.0 * err / bsz;
            }
            let critic_loss = loss / bsz;
            if !critic_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "agent {i}: critic loss became non-finite after {} updates (learning rate too high?)",
                    self.updates
                )));
            }
            let (mut grads, _) = policy.critic.backward_batch(&cache, &upstream)?;
            policy.critic_opt.step(
                &mut policy.critic,
                &mut grads,
                self.cfg.lr_critic,
                self.cfg.grad_clip,
            );

            let actor_idx = if self.cfg.shared_actor { 0 } else { i };
            let own_obs = obs
                .rows(self.obs_offsets[i], self.specs[i].obs_dim)
                .into_owned();
            let (own_act, actor_cache) = self.policies[actor_idx].actor.forward_batch(&own_obs)?;
            let mut x_pi = x.clone();
            x_pi.rows_mut(obs_rows + self.act_offsets[i], self.specs[i].act_dim)
                .copy_from(&own_act);
            let critic = &self.policies[i].critic;
            let (q_pi, q_cache) = critic.forward_batch(&x_pi)?;
            let actor_objective = q_pi.row(0).sum() / bsz;
            // minimize -mean(Q)
            let up = DMatrix::from_element(1, batch.len(), -1.0 / bsz);
            let (_, dx) = critic.backward_batch(&q_cache, &up)?;
            let d_act = dx
                .rows(obs_rows + self.act_offsets[i], self.specs[i].act_dim)
                .into_owned();
            let actor_policy = &mut self.policies[actor_idx];
            let (mut a_grads, _) = actor_policy.actor.backward_batch(&actor_cache, &d_act)?;
            if !a_grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "agent {i}: non-finite actor gradient"
                )));
            }
            actor_policy.actor_opt.step(
                &mut actor_policy.actor,
                &mut a_grads,
                self.cfg.lr_actor,
                self.cfg.grad_clip,
            );

            stats.push(UpdateStats {
                critic_loss,
                actor_objective,
            });
        }

        let tau = self.cfg.tau;
        for i in 0..n_agents {
            let p = &mut self.policies[i];
            soft_update(&mut p.critic_target, &p.critic, tau)?;
            if !self.cfg.shared_actor || i == 0 {
                soft_update(&mut p.actor_target, &p.actor, tau)?;
            }
        }
        if self.cfg.shared_actor {
            let (first, rest) = self.policies.split_at_mut(1);
            for p in rest {
                p.actor.clone_from(&first[0].actor);
                p.actor_target.clone_from(&first[0].actor_target);
            }
        }
        self.updates += 1;
        self.noise_sigma = (self.noise_sigma * self.cfg.noise_decay).max(self.cfg.noise_floor);
        Ok(stats)
    }
}

/// Free-function form of [`Maddpg::update`].
pub fn maddpg_update(agents: &mut Maddpg, batch: &[&Transition]) -> Result<Vec<UpdateStats>> {
    agents.update(batch)
}

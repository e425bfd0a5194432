//! Uplink power control: single-layer MADDPG (one agent per transmitting
//! entity) and the double-layer D-MADDPG (entity budgets, then per-antenna
//! splits).

use serde::{Deserialize, Serialize};

use super::scenario::{RewardMode, Scenario};
use super::selection::EnvState;
use super::train::{Episode, MarlTask};
use crate::error::{Error, Result};
use crate::marl::{AgentSpec, Transition};
use crate::signal::{EpisodeMetrics, PowerAllocation, Receiver};

/// What a layer-1 agent controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntityMode {
    /// One entity per UE holding its antennas.
    #[default]
    Ue,
    /// One entity per BS holding the streams whose strongest large-scale link is that BS.
    Bs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcLayers {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcTaskConfig {
    pub entity: EntityMode,
    /// Reward penalty per watt of consumed power.
    pub power_penalty: f64,
    /// Layer-2 logits are `temperature * score`.
    pub softmax_temperature: f64,
    pub reward: RewardMode,
}

impl Default for PcTaskConfig {
    fn default() -> Self {
        Self {
            entity: EntityMode::Ue,
            power_penalty: 0.0,
            softmax_temperature: 4.0,
            reward: RewardMode::Team,
        }
    }
}

impl PcTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power_penalty >= 0.0 && self.power_penalty.is_finite()) {
            return Err(Error::config("task.power_penalty", "must be >= 0"));
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return Err(Error::config("task.softmax_temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// Affine map of an action in `[-1, 1]` onto `[0, p_max]`.
pub fn action_to_power(action: f64, p_max: f64) -> f64 {
    p_max * (action.clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Stream groups of each entity; BS entities without streams are dropped.
pub fn entities(scenario: &Scenario, mode: EntityMode) -> Vec<Vec<usize>> {
    let topo = &scenario.topology;
    match mode {
        EntityMode::Ue => {
            let ns = topo.antennas_per_ue();
            (0..topo.num_ue())
                .map(|k| (k * ns..(k + 1) * ns).collect())
                .collect()
        }
        EntityMode::Bs => {
            let mut groups = vec![Vec::new(); topo.num_bs()];
            for u in 0..topo.num_streams() {
                let best = (0..topo.num_bs())
                    .max_by(|&a, &b| {
                        scenario
                            .lsf
                            .beta(u, a)
                            .total_cmp(&scenario.lsf.beta(u, b))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                groups[best].push(u);
            }
            groups.into_iter().filter(|g| !g.is_empty()).collect()
        }
    }
}

/// Splits `budget` by `softmax(temperature * scores)` with every share capped
/// at `p_max`; capped excess is redistributed proportionally so the shares
/// always sum to the budget.
pub fn split_budget(budget: f64, scores: &[f64], temperature: f64, p_max: f64) -> Result<Vec<f64>> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::invalid("entity without antennas"));
    }
    if !(budget >= 0.0) || budget > p_max * n as f64 * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "budget {budget} outside [0, {}]",
            p_max * n as f64
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite layer-2 score"));
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores
        .iter()
        .map(|s| ((s - top) * temperature).exp())
        .collect();
    let mut out = vec![0.0; n];
    let mut capped = vec![false; n];
    let mut remaining = budget;
    loop {
        let free: f64 = (0..n).filter(|&i| !capped[i]).map(|i| w[i]).sum();
        let mut newly = false;
        for i in 0..n {
            if !capped[i] {
                out[i] = remaining * w[i] / free;
                if out[i] > p_max {
                    capped[i] = true;
                    newly = true;
                }
            }
        }
        if !newly {
            break;
        }
        for i in 0..n {
            if capped[i] {
                out[i] = p_max;
            }
        }
        remaining = budget - p_max * capped.iter().filter(|&&c| c).count() as f64;
        if capped.iter().all(|&c| c) {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcStep {
    pub powers: PowerAllocation,
    pub metrics: EpisodeMetrics,
    pub rewards: Vec<f64>,
    /// Layer-1 budgets per entity (single-layer: the entity's total power).
    pub budgets: Vec<f64>,
}

/// Power-control environment in either layering.
#[derive(Debug, Clone)]
pub struct PcEnv {
    scenario: Scenario,
    receiver: Receiver,
    cfg: PcTaskConfig,
    layers: PcLayers,
    entities: Vec<Vec<usize>>,
    /// Entity of each stream.
    stream_entity: Vec<usize>,
    beta: Vec<Vec<f64>>,
    state: EnvState,
}

impl PcEnv {
    pub fn reset(scenario: Scenario, cfg: PcTaskConfig, layers: PcLayers) -> Result<Self> {
        cfg.validate()?;
        let entities = entities(&scenario, cfg.entity);
        let mut stream_entity = vec![0; scenario.num_streams()];
        for (e, g) in entities.iter().enumerate() {
            for &u in g {
                stream_entity[u] = e;
            }
        }
        Ok(Self {
            receiver: scenario.receiver(),
            beta: scenario.beta_features(),
            scenario,
            cfg,
            layers,
            entities,
            stream_entity,
            state: EnvState { last_sum_se: 0.0 },
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn entities(&self) -> &[Vec<usize>] {
        &self.entities
    }

    pub fn layers(&self) -> PcLayers {
        self.layers
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    fn p_max(&self) -> f64 {
        self.scenario.signal.p_max_w
    }

    fn se_feature(&self) -> f64 {
        self.state.last_sum_se / (10.0 * self.scenario.num_streams() as f64)
    }

    fn position(&self, streams: &[usize]) -> [f64; 2] {
        let topo = &self.scenario.topology;
        let mut p = [0.0; 2];
        for &u in streams {
            let q = self.scenario.normalized_position(topo.stream_owner(u));
            p[0] += q[0];
            p[1] += q[1];
        }
        let n = streams.len() as f64;
        [p[0] / n, p[1] / n]
    }

    /// Layer-1 (or single-layer) observation: mean large-scale features of the
    /// entity's streams per BS, centroid position, last sum SE.
    pub fn entity_observation(&self, e: usize) -> Vec<f64> {
        let streams = &self.entities[e];
        let m = self.scenario.num_bs();
        let mut obs: Vec<f64> = (0..m)
            .map(|b| streams.iter().map(|&u| self.beta[u][b]).sum::<f64>() / streams.len() as f64)
            .collect();
        obs.extend(self.position(streams));
        obs.push(self.se_feature());
        obs
    }

    /// Layer-2 observation of one stream given its entity's budget.
    pub fn stream_observation(&self, u: usize, budget: f64) -> Vec<f64> {
        let e = self.stream_entity[u];
        let mut obs = self.beta[u].clone();
        obs.extend(self.position(&[u]));
        obs.push(budget / (self.p_max() * self.entities[e].len() as f64));
        obs.push(self.se_feature());
        obs
    }

    pub fn layer1_specs(&self) -> Vec<AgentSpec> {
        let spec = AgentSpec {
            obs_dim: self.scenario.num_bs() + 3,
            act_dim: 1,
        };
        vec![spec; self.entities.len()]
    }

    pub fn layer2_specs(&self) -> Vec<AgentSpec> {
        let spec = AgentSpec {
            obs_dim: self.scenario.num_bs() + 4,
            act_dim: 1,
        };
        vec![spec; self.scenario.num_streams()]
    }

    /// Entity budgets `B_e = p_max n_e (a_e + 1) / 2`.
    pub fn budgets(&self, layer1: &[f64]) -> Result<Vec<f64>> {
        if layer1.len() != self.entities.len() {
            return Err(Error::shape("one layer-1 action per entity expected"));
        }
        Ok(layer1
            .iter()
            .zip(&self.entities)
            .map(|(&a, g)| action_to_power(a, self.p_max()) * g.len() as f64)
            .collect())
    }

    /// Per-stream powers: single layer applies each entity's level to all its
    /// streams; double layer splits budgets by the layer-2 scores.
    pub fn powers(&self, layer1: &[f64], layer2: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let budgets = self.budgets(layer1)?;
        let mut p = vec![0.0; self.scenario.num_streams()];
        match layer2 {
            None => {
                for (g, &a) in self.entities.iter().zip(layer1) {
                    let level = action_to_power(a, self.p_max());
                    for &u in g {
                        p[u] = level;
                    }
                }
            }
            Some(scores) => {
                if scores.len() != p.len() {
                    return Err(Error::shape("one layer-2 score per stream expected"));
                }
                for (g, &b) in self.entities.iter().zip(&budgets) {
                    let s: Vec<f64> = g.iter().map(|&u| scores[u]).collect();
                    let split = split_budget(b, &s, self.cfg.softmax_temperature, self.p_max())?;
                    let total: f64 = split.iter().sum();
                    assert!(
                        (total - b).abs() <= 1e-9 * b.max(f64::MIN_POSITIVE),
                        "budget conservation violated: {total} vs {b}"
                    );
                    for (&u, x) in g.iter().zip(split) {
                        p[u] = x.min(self.p_max());
                    }
                }
            }
        }
        Ok((p, budgets))
    }

    /// Sets powers, draws realization `drop_seed`, and scores it with every antenna active.
    pub fn step(
        &mut self,
        layer1: &[f64],
        layer2: Option<&[f64]>,
        drop_seed: u64,
    ) -> Result<PcStep> {
        if layer1
            .iter()
            .chain(layer2.unwrap_or(&[]))
            .any(|x| !(-1.0..=1.0).contains(x))
        {
            return Err(Error::invalid("power action outside [-1, 1]"));
        }
        let (p, budgets) = self.powers(layer1, layer2)?;
        let powers = PowerAllocation::new(p, self.p_max())?;
        let scn = &self.scenario;
        let active = vec![vec![true; scn.antennas_per_bs()]; scn.num_bs()];
        let h = scn.realize(drop_seed);
        let metrics = scn.evaluate(&self.receiver, &h, &active, &powers)?;
        self.state.last_sum_se = metrics.sum_se;
        let (mode, penalty) = (self.cfg.reward, self.cfg.power_penalty);
        let mut rewards: Vec<f64> = self
            .entities
            .iter()
            .map(|g| mode.reward(&metrics, penalty, g))
            .collect();
        if layer2.is_some() {
            rewards.extend((0..scn.num_streams()).map(|u| mode.reward(&metrics, penalty, &[u])));
        }
        Ok(PcStep {
            powers,
            metrics,
            rewards,
            budgets,
        })
    }
}

impl MarlTask for PcEnv {
    fn group_specs(&self) -> Vec<Vec<AgentSpec>> {
        match self.layers {
            PcLayers::Single => vec![self.layer1_specs()],
            PcLayers::Double => vec![self.layer1_specs(), self.layer2_specs()],
        }
    }

    fn run_episode(
        &mut self,
        drop_seed: u64,
        act: &mut dyn FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<Episode> {
        let obs1: Vec<f64> = (0..self.entities.len())
            .flat_map(|e| self.entity_observation(e))
            .collect();
        let a1 = act(0, &obs1)?;
        let (obs2, a2) = match self.layers {
            PcLayers::Single => (None, None),
            PcLayers::Double => {
                let budgets = self.budgets(&a1)?;
                let obs2: Vec<f64> = (0..self.scenario.num_streams())
                    .flat_map(|u| self.stream_observation(u, budgets[self.stream_entity[u]]))
                    .collect();
                let a2 = act(1, &obs2)?;
                (Some(obs2), Some(a2))
            }
        };
        let step = self.step(&a1, a2.as_deref(), drop_seed)?;
        let reward = RewardMode::Team.reward(&step.metrics, self.cfg.power_penalty, &[]);
        let n1 = self.entities.len();
        let next1: Vec<f64> = (0..n1).flat_map(|e| self.entity_observation(e)).collect();
        let mut transitions = vec![Transition {
            joint_obs: obs1,
            joint_actions: a1,
            rewards: step.rewards[..n1].to_vec(),
            joint_next_obs: next1,
            done: true,
        }];
        if let (Some(obs2), Some(a2)) = (obs2, a2) {
            let u_count = self.scenario.num_streams();
            let next2: Vec<f64> = (0..u_count)
                .flat_map(|u| self.stream_observation(u, step.budgets[self.stream_entity[u]]))
                .collect();
            transitions.push(Transition {
                joint_obs: obs2,
                joint_actions: a2,
                rewards: step.rewards[n1..].to_vec(),
                joint_next_obs: next2,
                done: true,
            });
        }
        Ok(Episode {
            transitions,
            reward,
            metrics: step.metrics,
        })
    }

    fn env_state(&self) -> EnvState {
        self.state
    }

    fn set_env_state(&mut self, state: EnvState) {
        self.state = state;
    }
}

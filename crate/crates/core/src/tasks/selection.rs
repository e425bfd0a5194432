//! Antenna selection: score decoding, the greedy large-scale-fading baseline,
//! the exhaustive oracle, and the multi-agent environment.
//!
//! Agents are UE antennas (streams) and every agent claims exactly one BS
//! antenna. The active set of a BS is the set of claimed antennas; each stream
//! is combined over all active antennas of every BS.

use serde::{Deserialize, Serialize};

use super::scenario::{RewardMode, Scenario};
use crate::channel::{ChannelRealization, VisibilityMask};
use crate::error::{Error, Result};
use crate::geometry::NetworkTopology;
use crate::marl::{AgentSpec, Transition};
use crate::signal::{
    AntennaId, CombinerKind, EpisodeMetrics, PowerAllocation, Receiver, SelectionAssignment,
};

/// Flat antenna index `m * N_r + n`.
fn antenna_id(flat: usize, n_r: usize) -> AntennaId {
    AntennaId {
        bs: flat / n_r,
        antenna: flat % n_r,
    }
}

fn visible_antennas(
    topology: &NetworkTopology,
    mask: &VisibilityMask,
    stream: usize,
) -> Vec<usize> {
    let n_r = topology.antennas_per_bs();
    let k = topology.stream_owner(stream);
    (0..topology.num_bs() * n_r)
        .filter(|&i| mask.is_visible(k, i / n_r, i % n_r))
        .collect()
}

/// Kuhn augmenting path: tries to give `agent` an antenna by displacing
/// current owners. Candidates are explored in the agent's preference order.
fn augment(
    agent: usize,
    prefs: &[Vec<usize>],
    owner: &mut [Option<usize>],
    claim: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &a in &prefs[agent] {
        if seen[a] {
            continue;
        }
        seen[a] = true;
        let free = match owner[a] {
            None => true,
            Some(other) => augment(other, prefs, owner, claim, seen),
        };
        if free {
            owner[a] = Some(agent);
            claim[agent] = Some(a);
            return true;
        }
    }
    false
}

/// Completes a partial one-to-one claim so every agent holds a visible antenna,
/// or reports infeasibility.
fn complete_matching(
    prefs: &[Vec<usize>],
    owner: &mut [Option<usize>],
    claim: &mut [Option<usize>],
) -> Result<()> {
    for agent in 0..prefs.len() {
        if claim[agent].is_some() {
            continue;
        }
        let mut seen = vec![false; owner.len()];
        if !augment(agent, prefs, owner, claim, &mut seen) {
            return Err(Error::Infeasible(format!(
                "no conflict-free antenna assignment exists: agent {agent} cannot be served without reuse"
            )));
        }
    }
    Ok(())
}

fn build_assignment(
    claim: &[Option<usize>],
    topology: &NetworkTopology,
    mask: &VisibilityMask,
) -> Result<SelectionAssignment> {
    let n_r = topology.antennas_per_bs();
    let assign = claim
        .iter()
        .map(|c| c.map(|a| antenna_id(a, n_r)))
        .collect();
    SelectionAssignment::from_assignments(assign, topology, mask)
}

/// Turns per-agent score vectors (length `M * N_r`) into a conflict-free assignment.
///
/// All (agent, visible antenna) pairs are processed in descending score order,
/// ties going to the lower agent and then the lower antenna index; a pair is
/// granted when neither side is taken yet. So each agent gets its best antenna
/// unless a higher score claimed it first, in which case it falls to its next
/// best unclaimed one. If the greedy pass strands an agent although a full
/// assignment exists, augmenting paths repair it.
pub fn decode_scores(
    scores: &[Vec<f64>],
    topology: &NetworkTopology,
    mask: &VisibilityMask,
) -> Result<SelectionAssignment> {
    let u_count = topology.num_streams();
    let total = topology.num_bs() * topology.antennas_per_bs();
    if scores.len() != u_count {
        return Err(Error::shape(format!(
            "{} score vectors for {u_count} agents",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.len() != total) {
        return Err(Error::shape(format!(
            "score vector of length {}, expected {total}",
            bad.len()
        )));
    }
    if scores.iter().flatten().any(|x| x.is_nan()) {
        return Err(Error::invalid("NaN antenna score"));
    }
    let visible: Vec<Vec<usize>> = (0..u_count)
        .map(|u| visible_antennas(topology, mask, u))
        .collect();
    let mut pairs: Vec<(usize, usize)> = visible
        .iter()
        .enumerate()
        .flat_map(|(u, v)| v.iter().map(move |&a| (u, a)))
        .collect();
    pairs.sort_by(|&(u1, a1), &(u2, a2)| {
        scores[u2][a2]
            .total_cmp(&scores[u1][a1])
            .then(u1.cmp(&u2))
            .then(a1.cmp(&a2))
    });
    let mut owner = vec![None; total];
    let mut claim = vec![None; u_count];
    for &(u, a) in &pairs {
        if claim[u].is_none() && owner[a].is_none() {
            claim[u] = Some(a);
            owner[a] = Some(u);
        }
    }
    if claim.iter().any(Option::is_none) {
        let prefs: Vec<Vec<usize>> = (0..u_count)
            .map(|u| {
                let mut v = visible[u].clone();
                v.sort_by(|&a, &b| scores[u][b].total_cmp(&scores[u][a]).then(a.cmp(&b)));
                v
            })
            .collect();
        complete_matching(&prefs, &mut owner, &mut claim)?;
    }
    build_assignment(&claim, topology, mask)
}

/// Greedy selection by mean channel gain: streams in descending order of their
/// strongest mean gain each take their best remaining visible antenna.
pub fn lsf_assignment(scenario: &Scenario) -> Result<SelectionAssignment> {
    let topo = &scenario.topology;
    let n_r = topo.antennas_per_bs();
    let u_count = topo.num_streams();
    let gain = |u: usize, a: usize| scenario.synth.mean_gain(a / n_r, a % n_r, u);
    let visible: Vec<Vec<usize>> = (0..u_count)
        .map(|u| visible_antennas(topo, &scenario.mask, u))
        .collect();
    let strongest: Vec<f64> = (0..u_count)
        .map(|u| visible[u].iter().map(|&a| gain(u, a)).fold(0.0, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..u_count).collect();
    order.sort_by(|&a, &b| strongest[b].total_cmp(&strongest[a]).then(a.cmp(&b)));
    let mut owner = vec![None; topo.num_bs() * n_r];
    let mut claim = vec![None; u_count];
    for &u in &order {
        let best = visible[u]
            .iter()
            .copied()
            .filter(|&a| owner[a].is_none())
            .fold(None, |best: Option<usize>, a| match best {
                Some(b) if gain(u, b) >= gain(u, a) => Some(b),
                _ => Some(a),
            });
        if let Some(a) = best {
            claim[u] = Some(a);
            owner[a] = Some(u);
        }
    }
    if claim.iter().any(Option::is_none) {
        let prefs: Vec<Vec<usize>> = (0..u_count)
            .map(|u| {
                let mut v = visible[u].clone();
                v.sort_by(|&a, &b| gain(u, b).total_cmp(&gain(u, a)).then(a.cmp(&b)));
                v
            })
            .collect();
        complete_matching(&prefs, &mut owner, &mut claim)?;
    }
    build_assignment(&claim, topo, &scenario.mask)
}

/// Number of conflict-free full assignments, or `None` once it exceeds `cap`.
pub fn count_assignments(
    topology: &NetworkTopology,
    mask: &VisibilityMask,
    cap: usize,
) -> Option<usize> {
    let visible: Vec<Vec<usize>> = (0..topology.num_streams())
        .map(|u| visible_antennas(topology, mask, u))
        .collect();
    let mut used = vec![false; topology.num_bs() * topology.antennas_per_bs()];
    let mut count = 0usize;
    fn rec(
        u: usize,
        visible: &[Vec<usize>],
        used: &mut [bool],
        count: &mut usize,
        cap: usize,
    ) -> bool {
        if u == visible.len() {
            *count += 1;
            return *count <= cap;
        }
        for &a in &visible[u] {
            if !used[a] {
                used[a] = true;
                let ok = rec(u + 1, visible, used, count, cap);
                used[a] = false;
                if !ok {
                    return false;
                }
            }
        }
        true
    }
    rec(0, &visible, &mut used, &mut count, cap).then_some(count)
}

/// Calls `f` with every conflict-free full assignment in lexicographic order.
fn for_each_assignment(
    topology: &NetworkTopology,
    mask: &VisibilityMask,
    f: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let visible: Vec<Vec<usize>> = (0..topology.num_streams())
        .map(|u| visible_antennas(topology, mask, u))
        .collect();
    let mut used = vec![false; topology.num_bs() * topology.antennas_per_bs()];
    let mut current = Vec::with_capacity(visible.len());
    fn rec(
        visible: &[Vec<usize>],
        used: &mut [bool],
        current: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]) -> Result<()>,
    ) -> Result<()> {
        if current.len() == visible.len() {
            return f(current);
        }
        for &a in &visible[current.len()] {
            if !used[a] {
                used[a] = true;
                current.push(a);
                rec(visible, used, current, f)?;
                current.pop();
                used[a] = false;
            }
        }
        Ok(())
    }
    rec(&visible, &mut used, &mut current, f)
}

/// Best assignment found by exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub assignment: SelectionAssignment,
    /// Mean sum SE over the batch.
    pub sum_se: f64,
    pub evaluated: usize,
}

/// Mean sum SE of a fixed assignment over a batch of realizations.
pub fn mean_sum_se(
    scenario: &Scenario,
    receiver: &Receiver,
    assignment: &SelectionAssignment,
    drops: &[ChannelRealization],
) -> Result<f64> {
    let powers = PowerAllocation::uniform(scenario.num_streams(), scenario.signal.p_max_w);
    let mut total = 0.0;
    for h in drops {
        total += scenario
            .evaluate(receiver, h, &assignment.active, &powers)?
            .sum_se;
    }
    Ok(total / drops.len() as f64)
}

/// Exhaustive search over conflict-free assignments, scored by mean sum SE
/// under MR combining on `drops`. Refuses instances with more than `cap`
/// assignments.
pub fn brute_force_selection_oracle(
    scenario: &Scenario,
    drops: &[ChannelRealization],
    cap: usize,
) -> Result<OracleResult> {
    if drops.is_empty() {
        return Err(Error::invalid("oracle needs at least one realization"));
    }
    let topo = &scenario.topology;
    let Some(count) = count_assignments(topo, &scenario.mask, cap) else {
        return Err(Error::Infeasible(format!(
            "more than {cap} candidate assignments; use a smaller instance or raise the cap"
        )));
    };
    if count == 0 {
        return Err(Error::Infeasible(
            "no conflict-free antenna assignment exists".into(),
        ));
    }
    let receiver = Receiver {
        combiner: CombinerKind::Mr,
        ..scenario.receiver()
    };
    let n_r = topo.antennas_per_bs();
    let mut best: Option<(f64, SelectionAssignment)> = None;
    let mut evaluated = 0;
    for_each_assignment(topo, &scenario.mask, &mut |claim| {
        let assign = claim.iter().map(|&a| Some(antenna_id(a, n_r))).collect();
        let sel = SelectionAssignment::from_assignments(assign, topo, &scenario.mask)?;
        let value = mean_sum_se(scenario, &receiver, &sel, drops)?;
        evaluated += 1;
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, sel));
        }
        Ok(())
    })?;
    let (sum_se, assignment) = best.expect("count > 0");
    Ok(OracleResult {
        assignment,
        sum_se,
        evaluated,
    })
}

/// Knobs of the selection task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsTaskConfig {
    /// Reward penalty per watt of consumed power.
    pub power_penalty: f64,
    pub reward: RewardMode,
}

impl Default for AsTaskConfig {
    fn default() -> Self {
        Self {
            power_penalty: 0.0,
            reward: RewardMode::Team,
        }
    }
}

/// Environment state carried across episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub last_sum_se: f64,
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct AsStep {
    pub assignment: SelectionAssignment,
    pub metrics: EpisodeMetrics,
    /// One reward per agent; identical under the team reward.
    pub rewards: Vec<f64>,
}

/// Multi-agent antenna-selection environment; one agent per stream.
#[derive(Debug, Clone)]
pub struct AsEnv {
    scenario: Scenario,
    receiver: Receiver,
    cfg: AsTaskConfig,
    features: Vec<Vec<f64>>,
    state: EnvState,
}

impl AsEnv {
    pub fn reset(scenario: Scenario, cfg: AsTaskConfig) -> Result<Self> {
        if !(cfg.power_penalty >= 0.0 && cfg.power_penalty.is_finite()) {
            return Err(Error::config("task.power_penalty", "must be >= 0"));
        }
        let features = scenario.antenna_gain_features();
        Ok(Self {
            receiver: scenario.receiver(),
            scenario,
            cfg,
            features,
            state: EnvState { last_sum_se: 0.0 },
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn num_agents(&self) -> usize {
        self.scenario.num_streams()
    }

    pub fn agent_specs(&self) -> Vec<AgentSpec> {
        let obs_dim = self.scenario.total_antennas() + 3;
        vec![
            AgentSpec {
                obs_dim,
                act_dim: self.scenario.total_antennas(),
            };
            self.num_agents()
        ]
    }

    /// Agent observation: own mean-gain features, UE position, last sum SE.
    pub fn observation(&self, agent: usize) -> Vec<f64> {
        let mut obs = self.features[agent].clone();
        obs.extend(
            self.scenario
                .normalized_position(self.scenario.topology.stream_owner(agent)),
        );
        obs.push(self.state.last_sum_se / (10.0 * self.num_agents() as f64));
        obs
    }

    pub fn joint_observation(&self) -> Vec<f64> {
        (0..self.num_agents())
            .flat_map(|i| self.observation(i))
            .collect()
    }

    /// Decodes the scores, draws realization `drop_seed`, and scores it with
    /// only the assigned antennas active.
    pub fn step(&mut self, joint_actions: &[Vec<f64>], drop_seed: u64) -> Result<AsStep> {
        if let Some(bad) = joint_actions
            .iter()
            .flatten()
            .find(|x| !(-1.0..=1.0).contains(*x))
        {
            return Err(Error::invalid(format!(
                "antenna score {bad} outside [-1, 1]"
            )));
        }
        let scn = &self.scenario;
        let assignment = decode_scores(joint_actions, &scn.topology, &scn.mask)?;
        let h = scn.realize(drop_seed);
        let powers = PowerAllocation::uniform(scn.num_streams(), scn.signal.p_max_w);
        let metrics = scn.evaluate(&self.receiver, &h, &assignment.active, &powers)?;
        let rewards = (0..self.num_agents())
            .map(|u| {
                self.cfg
                    .reward
                    .reward(&metrics, self.cfg.power_penalty, &[u])
            })
            .collect();
        self.state.last_sum_se = metrics.sum_se;
        Ok(AsStep {
            assignment,
            rewards,
            metrics,
        })
    }
}

impl super::train::MarlTask for AsEnv {
    fn group_specs(&self) -> Vec<Vec<AgentSpec>> {
        vec![self.agent_specs()]
    }

    fn run_episode(
        &mut self,
        drop_seed: u64,
        act: &mut dyn FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<super::train::Episode> {
        let obs = self.joint_observation();
        let flat = act(0, &obs)?;
        let width = self.scenario.total_antennas();
        let actions: Vec<Vec<f64>> = flat.chunks(width).map(<[f64]>::to_vec).collect();
        let step = self.step(&actions, drop_seed)?;
        let reward = RewardMode::Team.reward(&step.metrics, self.cfg.power_penalty, &[]);
        Ok(super::train::Episode {
            transitions: vec![Transition {
                joint_next_obs: self.joint_observation(),
                joint_obs: obs,
                joint_actions: flat,
                rewards: step.rewards,
                done: true,
            }],
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

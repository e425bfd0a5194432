//! A fully specified network instance plus seed bookkeeping.

use serde::{Deserialize, Serialize};

use crate::channel::{
    generate_visibility_mask, large_scale_fading, ChannelConfig, ChannelRealization,
    ChannelSynthesizer, LargeScaleFading, VisibilityMask,
};
use crate::error::{Error, Result};
use crate::geometry::{generate_topology, NetworkTopology, TopologyConfig};
use crate::signal::{EpisodeMetrics, PowerAllocation, Receiver, SignalConfig};

/// Independent RNG streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    Topology = 1,
    Shadowing = 2,
    Visibility = 3,
    TrainDrops = 4,
    EvalDrops = 5,
    Trainer = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: SeedStream) -> u64 {
    splitmix64(base ^ splitmix64(stream as u64))
}

/// Seed of the `index`-th channel drop of a stream.
pub fn drop_seed(base: u64, stream: SeedStream, index: u64) -> u64 {
    splitmix64(derive_seed(base, stream).wrapping_add(index))
}

/// Seeds of the held-out evaluation batch; shared by every method for paired comparisons.
pub fn eval_drop_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| drop_seed(base, SeedStream::EvalDrops, i))
        .collect()
}

/// Topology, large-scale fading, visibility and link budget for one seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: NetworkTopology,
    pub lsf: LargeScaleFading,
    pub mask: VisibilityMask,
    pub synth: ChannelSynthesizer,
    pub signal: SignalConfig,
    pub seed: u64,
}

impl Scenario {
    pub fn build(
        topology: &TopologyConfig,
        channel: &ChannelConfig,
        signal: &SignalConfig,
        seed: u64,
    ) -> Result<Self> {
        topology.validate()?;
        channel.validate()?;
        signal.validate()?;
        let topo = generate_topology(topology, derive_seed(seed, SeedStream::Topology))?;
        let lsf = large_scale_fading(
            &topo,
            channel.shadowing_std_db,
            derive_seed(seed, SeedStream::Shadowing),
        )?;
        let mask = generate_visibility_mask(
            &topo,
            &channel.vr(),
            derive_seed(seed, SeedStream::Visibility),
        )?;
        let synth = ChannelSynthesizer::new(&topo, &lsf, &mask, channel.kappa())?;
        Ok(Self {
            topology: topo,
            lsf,
            mask,
            synth,
            signal: *signal,
            seed,
        })
    }

    pub fn num_streams(&self) -> usize {
        self.topology.num_streams()
    }

    pub fn num_bs(&self) -> usize {
        self.topology.num_bs()
    }

    pub fn antennas_per_bs(&self) -> usize {
        self.topology.antennas_per_bs()
    }

    pub fn total_antennas(&self) -> usize {
        self.num_bs() * self.antennas_per_bs()
    }

    pub fn receiver(&self) -> Receiver {
        self.signal.receiver()
    }

    pub fn realize(&self, drop_seed: u64) -> ChannelRealization {
        self.synth.realize(drop_seed)
    }

    /// SE/EE of one realization with the given active sets and powers.
    pub fn evaluate(
        &self,
        receiver: &Receiver,
        channel: &ChannelRealization,
        active: &[Vec<bool>],
        powers: &PowerAllocation,
    ) -> Result<EpisodeMetrics> {
        let sinr = receiver.sinr(channel, active, powers)?;
        let count = active
            .iter()
            .map(|a| a.iter().filter(|&&x| x).count())
            .sum();
        let metrics = EpisodeMetrics::new(
            &sinr,
            powers,
            count,
            &self.signal.power_model(),
            self.signal.bandwidth_hz,
        )?;
        if !metrics.sum_se.is_finite() {
            return Err(Error::Numerical("non-finite sum SE".into()));
        }
        Ok(metrics)
    }

    /// UE center mapped to `[-1, 1]^2`.
    pub fn normalized_position(&self, ue: usize) -> [f64; 2] {
        let c = self.topology.ue_panels[ue].center;
        let a = self.topology.area_side;
        [2.0 * c.x / a - 1.0, 2.0 * c.y / a - 1.0]
    }

    /// Per-stream mean-gain features over every BS antenna (`m * N_r + n`),
    /// standardized over all visible entries; invisible entries read `-3`.
    pub fn antenna_gain_features(&self) -> Vec<Vec<f64>> {
        let n_r = self.antennas_per_bs();
        let total = self.total_antennas();
        let db = |u: usize, idx: usize| {
            let g = self.synth.mean_gain(idx / n_r, idx % n_r, u);
            (g > 0.0).then(|| 10.0 * g.log10())
        };
        let values: Vec<f64> = (0..self.num_streams())
            .flat_map(|u| (0..total).filter_map(move |i| db(u, i)))
            .collect();
        let (mean, std) = mean_std(&values);
        (0..self.num_streams())
            .map(|u| {
                (0..total)
                    .map(|i| db(u, i).map_or(-3.0, |v| (v - mean) / std))
                    .collect()
            })
            .collect()
    }

    /// Per-stream `beta_dB` to every BS, standardized over all entries.
    pub fn beta_features(&self) -> Vec<Vec<f64>> {
        let m = self.num_bs();
        let values: Vec<f64> = (0..self.num_streams())
            .flat_map(|u| (0..m).map(move |b| (u, b)))
            .map(|(u, b)| self.lsf.beta_db(u, b))
            .collect();
        let (mean, std) = mean_std(&values);
        (0..self.num_streams())
            .map(|u| {
                (0..m)
                    .map(|b| (self.lsf.beta_db(u, b) - mean) / std)
                    .collect()
            })
            .collect()
    }
}

/// Mean and standard deviation, with the deviation floored at 1 so flat inputs stay finite.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1.0))
}

/// How a step's reward is shared among agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Every agent receives the penalized sum SE.
    #[default]
    Team,
    /// Each agent receives the SE of the streams it controls, minus its
    /// per-stream share of the power penalty.
    PerAgent,
}

impl RewardMode {
    /// Reward of an agent controlling `streams` out of `metrics.se_per_stream`.
    pub fn reward(self, metrics: &EpisodeMetrics, penalty: f64, streams: &[usize]) -> f64 {
        match self {
            RewardMode::Team => metrics.sum_se - penalty * metrics.total_power,
            RewardMode::PerAgent => {
                let share = metrics.total_power / metrics.se_per_stream.len() as f64;
                streams
                    .iter()
                    .map(|&u| metrics.se_per_stream[u] - penalty * share)
                    .sum()
            }
        }
    }
}

/// Methods that can appear in a result record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    NoSelection,
    LsfSelection,
    MaddpgAs,
    EqualPower,
    Maddpg,
    DMaddpg,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NoSelection,
        Method::LsfSelection,
        Method::MaddpgAs,
        Method::EqualPower,
        Method::Maddpg,
        Method::DMaddpg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoSelection => "NoSelection",
            Method::LsfSelection => "LsfSelection",
            Method::MaddpgAs => "MaddpgAs",
            Method::EqualPower => "EqualPower",
            Method::Maddpg => "Maddpg",
            Method::DMaddpg => "DMaddpg",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::MaddpgAs | Method::Maddpg | Method::DMaddpg)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Evaluation metrics of one method on one seed's held-out batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub drop_seeds: Vec<u64>,
    pub metrics: Vec<EpisodeMetrics>,
}

impl MethodRun {
    pub fn mean_sum_se(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.sum_se))
    }

    pub fn mean_ee(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.ee))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// One training episode as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub reward: f64,
    pub sum_se: f64,
    pub ee: f64,
    /// Mean critic loss over agents and groups; `None` before updates start.
    pub critic_loss: Option<f64>,
    pub error: Option<String>,
}

/// Everything produced for one configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub runs: Vec<MethodRun>,
    pub curves: Vec<(Method, u64, Vec<EpisodeLog>)>,
}

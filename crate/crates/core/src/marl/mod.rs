//! From-scratch MADDPG: dense networks, replay, optimizers, and the joint update.

pub mod buffer;
pub mod maddpg;
pub mod mlp;
pub mod optim;

pub use buffer::{ReplayBuffer, Transition};
pub use maddpg::{
    actor_act, maddpg_update, AgentPolicy, AgentSpec, Maddpg, TrainConfig, UpdateStats,
};
pub use mlp::{soft_update, ForwardCache, Mlp, MlpGrads, OutputActivation};
pub use optim::{Optimizer, OptimizerKind};

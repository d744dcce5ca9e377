//! Per-reservoir agents: networks, the PPO update, training loop and checkpoints.

pub mod checkpoint;
pub mod network;
pub mod ppo;
pub mod train;

pub use network::{ActionSample, AgentNet, Heads, NetworkSizes, Observation};
pub use ppo::{
    compute_gae, normalize_advantages, ppo_loss, ppo_update, Gae, ModeMultipliers, PenaltyContext, Sample, TrainHyperparams,
    UpdateDiagnostics,
};
pub use checkpoint::Checkpoint;
pub use train::{build_agents, rollout, train, Agent, EpisodeLog, EpisodeStats, Rollout, RolloutOptions, StepRecord, TrainConfig, TrainOutcome};

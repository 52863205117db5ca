//! Multi-drone task execution on a grid: energy model, environment, deep
//! Q-learning agents, an exhaustive oracle, and the experiment harness.

pub mod config;
pub mod dqn;
pub mod energy;
pub mod experiments;
pub mod nn;
pub mod oracle;
pub mod world;

pub use dqn::{Agent, AgentConfig, EpsilonSchedule};
pub use energy::{PhysicsParams, PowerRates};
pub use experiments::{EpisodeRecord, ExperimentKind, ExperimentSpec, MetricsSeries};
pub use world::{Action, Environment, GridConfig, RewardCoefs, TaskSpec, WorldState};

//! Training runs, metric series, and the three experiment sweeps.
//!
//! A *run* trains a fresh team of agents on one sweep point with one seed.
//! An *experiment* expands its kind into sweep points and runs every
//! `(point, seed)` pair, each on its own random streams, so results do not
//! depend on how many runs execute in parallel.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqn::{Agent, AgentConfig, DqnError, EpsilonSchedule, Transition};
use crate::nn::{Mlp, NnError};
use crate::world::{
    observation_len, Action, Environment, GridConfig, RewardCoefs, TaskSpec, WorldError, WorldState,
};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("metrics need at least one episode")]
    EmptyWindow,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, e: impl fmt::Display) -> ExperimentError {
    ExperimentError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Vary the replay warm-up multiplier.
    ThresholdSweep,
    /// Fixed versus random task locations and lengths.
    Geometry,
    /// Vary the number of tasks (and drones).
    Density,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::ThresholdSweep => "threshold_sweep",
            ExperimentKind::Geometry => "geometry",
            ExperimentKind::Density => "density",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationMode {
    /// The configured layout, every episode.
    Fixed,
    /// Distinct candidate points drawn uniformly each episode.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    Fixed(u32),
    /// Inclusive range drawn uniformly per task and episode.
    Uniform(u32, u32),
}

impl fmt::Display for LengthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LengthMode::Fixed(n) => write!(f, "len{n}"),
            LengthMode::Uniform(a, b) => write!(f, "len{a}-{b}"),
        }
    }
}

/// Four tasks on the inner ring of the 5x5 grid, as `(column, row)`.
pub const DEFAULT_LAYOUT: [[usize; 2]; 4] = [[1, 1], [3, 1], [1, 3], [3, 3]];

/// How tasks are placed and sized each episode, in grid indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task_count: usize,
    pub locations: LocationMode,
    pub lengths: LengthMode,
    pub layout: Vec<usize>,
    pub candidates: Vec<usize>,
}

impl Scenario {
    pub fn validate(&self, grid: &GridConfig) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.task_count == 0 {
            return bad("task_count must be positive".into());
        }
        match self.lengths {
            LengthMode::Fixed(0) => return bad("task length must be at least 1".into()),
            LengthMode::Uniform(a, b) if a == 0 || a > b => {
                return bad(format!("bad length range {a}..={b}"))
            }
            _ => {}
        }
        let points = match self.locations {
            LocationMode::Fixed => {
                if self.layout.len() != self.task_count {
                    return bad(format!(
                        "fixed layout has {} points for {} tasks",
                        self.layout.len(),
                        self.task_count
                    ));
                }
                &self.layout
            }
            LocationMode::Random => {
                if self.candidates.len() < self.task_count {
                    return bad(format!(
                        "{} candidate points cannot hold {} tasks",
                        self.candidates.len(),
                        self.task_count
                    ));
                }
                &self.candidates
            }
        };
        for (i, &p) in points.iter().enumerate() {
            if p >= grid.point_count() || p == grid.base_index {
                return bad(format!("point {p} is off the grid or on the base"));
            }
            if points[..i].contains(&p) {
                return bad(format!("point {p} listed twice"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TaskSpec> {
        let locations: Vec<usize> = match self.locations {
            LocationMode::Fixed => self.layout.clone(),
            LocationMode::Random => {
                rand::seq::index::sample(rng, self.candidates.len(), self.task_count)
                    .into_iter()
                    .map(|i| self.candidates[i])
                    .collect()
            }
        };
        locations
            .into_iter()
            .map(|location| TaskSpec {
                location,
                length: match self.lengths {
                    LengthMode::Fixed(n) => n,
                    LengthMode::Uniform(a, b) => rng.random_range(a..=b),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub success: bool,
    pub accumulated_reward: f64,
    pub steps: u32,
    pub final_batteries: Vec<f64>,
    pub epsilon_at_start: f64,
    pub epsilon_at_end: f64,
    pub tasks: Vec<TaskSpec>,
}

/// Successful missions over all missions in `records`.
pub fn success_rate(records: &[EpisodeRecord]) -> Result<f64, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::EmptyWindow);
    }
    let wins = records.iter().filter(|r| r.success).count();
    Ok(wins as f64 / records.len() as f64)
}

/// Mean accumulated reward of the successful missions, if any.
pub fn avg_success_reward(records: &[EpisodeRecord]) -> Option<f64> {
    let (sum, n) = records
        .iter()
        .filter(|r| r.success)
        .fold((0.0, 0usize), |(s, n), r| (s + r.accumulated_reward, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    /// One past the index of the last episode in the window.
    pub window_end_episode: usize,
    pub epsilon: f64,
    pub success_rate: f64,
    pub avg_success_reward: Option<f64>,
    /// Episodes actually in the window (short at the start of a run).
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub window: usize,
    pub points: Vec<MetricsPoint>,
}

impl MetricsSeries {
    pub fn success_rate_series(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.success_rate).collect()
    }

    pub fn avg_success_reward_series(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.avg_success_reward).collect()
    }

    pub fn last(&self) -> Option<&MetricsPoint> {
        self.points.last()
    }
}

/// Trailing-window metrics every `stride` episodes, always including the last
/// episode. Windows are shorter than `window` only before that many episodes
/// exist.
pub fn derive_series(
    records: &[EpisodeRecord],
    window: usize,
    stride: usize,
) -> Result<MetricsSeries, ExperimentError> {
    if window == 0 || stride == 0 {
        return Err(ExperimentError::Config(
            "window and stride must be positive".into(),
        ));
    }
    let n = records.len();
    let mut ends: Vec<usize> = (window.min(n).max(1)..=n).step_by(stride).collect();
    if n > 0 && ends.last() != Some(&n) {
        ends.push(n);
    }
    let points = ends
        .into_iter()
        .map(|end| {
            let slice = &records[end.saturating_sub(window)..end];
            Ok(MetricsPoint {
                window_end_episode: end,
                epsilon: slice.last().map_or(0.0, |r| r.epsilon_at_end),
                success_rate: success_rate(slice)?,
                avg_success_reward: avg_success_reward(slice),
                episodes: slice.len(),
            })
        })
        .collect::<Result<_, ExperimentError>>()?;
    Ok(MetricsSeries { window, points })
}

/// Chooses each drone's action for a step and consumes the outcome.
pub trait Controller {
    fn joint_action(
        &mut self,
        state: &WorldState,
        observation: &[f64],
        epsilon: f64,
    ) -> Result<Vec<Action>, ExperimentError>;

    fn observe(
        &mut self,
        observation: &Arc<[f64]>,
        joint: &[Action],
        reward: f64,
        next_observation: &Arc<[f64]>,
        terminal: bool,
    ) -> Result<(), ExperimentError>;
}

/// One DQN agent per drone, all fed the shared global observation.
#[derive(Debug, Clone)]
pub struct DqnTeam {
    pub agents: Vec<Agent>,
    pub learning: bool,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

impl DqnTeam {
    pub fn new(agents: Vec<Agent>, explore_rng: ChaCha8Rng, replay_rng: ChaCha8Rng) -> Self {
        Self {
            agents,
            learning: true,
            explore_rng,
            replay_rng,
        }
    }
}

impl Controller for DqnTeam {
    fn joint_action(
        &mut self,
        _state: &WorldState,
        observation: &[f64],
        epsilon: f64,
    ) -> Result<Vec<Action>, ExperimentError> {
        self.agents
            .iter()
            .map(|a| Ok(a.select_action(observation, epsilon, &mut self.explore_rng)?))
            .collect()
    }

    fn observe(
        &mut self,
        observation: &Arc<[f64]>,
        joint: &[Action],
        reward: f64,
        next_observation: &Arc<[f64]>,
        terminal: bool,
    ) -> Result<(), ExperimentError> {
        if !self.learning {
            return Ok(());
        }
        for (agent, &action) in self.agents.iter_mut().zip(joint) {
            agent.store(Transition {
                state: Arc::clone(observation),
                action,
                reward,
                next_state: Arc::clone(next_observation),
                terminal,
            });
            agent.learn_step(&mut self.replay_rng)?;
        }
        Ok(())
    }
}

/// Replays a fixed list of joint actions, then hovers.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    pub script: Vec<Vec<Action>>,
    cursor: usize,
}

impl ScriptedController {
    pub fn new(script: Vec<Vec<Action>>) -> Self {
        Self { script, cursor: 0 }
    }
}

impl Controller for ScriptedController {
    fn joint_action(
        &mut self,
        state: &WorldState,
        _observation: &[f64],
        _epsilon: f64,
    ) -> Result<Vec<Action>, ExperimentError> {
        let joint = self
            .script
            .get(self.cursor)
            .cloned()
            .unwrap_or_else(|| vec![Action::Hover; state.drone_count()]);
        self.cursor += 1;
        Ok(joint)
    }

    fn observe(
        &mut self,
        _: &Arc<[f64]>,
        _: &[Action],
        _: f64,
        _: &Arc<[f64]>,
        _: bool,
    ) -> Result<(), ExperimentError> {
        Ok(())
    }
}

/// Runs one episode from reset to termination. `global_step` advances once
/// per environment step and drives the exploration schedule.
pub fn run_episode<C: Controller + ?Sized>(
    env: &Environment,
    tasks: &[TaskSpec],
    controller: &mut C,
    schedule: &EpsilonSchedule,
    global_step: &mut u64,
    episode: usize,
) -> Result<EpisodeRecord, ExperimentError> {
    let mut state = env.reset(tasks, tasks.len())?;
    let mut observation: Arc<[f64]> = env.encode_observation(&state).into();
    let epsilon_at_start = schedule.epsilon_at(*global_step);
    let mut accumulated_reward = 0.0;
    loop {
        let epsilon = schedule.epsilon_at(*global_step);
        let joint = controller.joint_action(&state, &observation, epsilon)?;
        let outcome = env.step(&state, &joint)?;
        let next_observation: Arc<[f64]> = env.encode_observation(&outcome.next_state).into();
        // A timeout truncates the episode; only a finished mission is terminal.
        controller.observe(
            &observation,
            &joint,
            outcome.reward,
            &next_observation,
            outcome.tasks_finished,
        )?;
        accumulated_reward += outcome.reward;
        *global_step += 1;
        state = outcome.next_state;
        observation = next_observation;
        if outcome.done {
            return Ok(EpisodeRecord {
                episode,
                success: outcome.success,
                accumulated_reward,
                steps: state.clock,
                final_batteries: state.batteries.clone(),
                epsilon_at_start,
                epsilon_at_end: schedule.epsilon_at(*global_step),
                tasks: tasks.to_vec(),
            });
        }
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub warmup_multiplier: usize,
    pub scenario: Scenario,
}

/// When a training run stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Exactly this many episodes.
    Episodes(usize),
    /// Until exploration reaches its floor, finishing the current episode.
    UntilFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub grid: GridConfig,
    pub rewards: RewardCoefs,
    pub agent: AgentConfig,
    pub schedule: EpsilonSchedule,
    pub budget: Budget,
    /// Warm-up multipliers for the threshold sweep.
    pub psi_values: Vec<usize>,
    /// Task counts for the density sweep.
    pub task_counts: Vec<usize>,
    /// Task count for the threshold and geometry sweeps.
    pub task_count: usize,
    pub locations: LocationMode,
    pub lengths: LengthMode,
    /// Variants run by the geometry sweep.
    pub geometry_variants: Vec<(LocationMode, LengthMode)>,
    /// Fixed layout as `(column, row)` pairs.
    pub layout: Vec<[usize; 2]>,
    /// Points random placement draws from; empty means every non-base point.
    pub candidates: Vec<[usize; 2]>,
    pub window: usize,
    pub report_every: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::ThresholdSweep,
            grid: GridConfig::default(),
            rewards: RewardCoefs::default(),
            agent: AgentConfig::default(),
            schedule: EpsilonSchedule::default(),
            budget: Budget::UntilFloor,
            psi_values: vec![1, 2, 5, 10],
            task_counts: (2..=10).collect(),
            task_count: 4,
            locations: LocationMode::Fixed,
            lengths: LengthMode::Fixed(5),
            geometry_variants: vec![
                (LocationMode::Fixed, LengthMode::Uniform(1, 5)),
                (LocationMode::Random, LengthMode::Fixed(5)),
                (LocationMode::Random, LengthMode::Uniform(1, 5)),
            ],
            layout: DEFAULT_LAYOUT.to_vec(),
            candidates: Vec::new(),
            window: 100,
            report_every: 10,
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentSpec {
    /// The published protocol for each experiment family.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            ..Self::default()
        };
        match kind {
            ExperimentKind::ThresholdSweep => Self {
                schedule: EpsilonSchedule {
                    floor: 0.15,
                    ..EpsilonSchedule::default()
                },
                ..base
            },
            ExperimentKind::Geometry => base,
            ExperimentKind::Density => Self {
                locations: LocationMode::Random,
                lengths: LengthMode::Uniform(1, 5),
                ..base
            },
        }
    }

    fn resolve_points(&self, points: &[[usize; 2]]) -> Result<Vec<usize>, ExperimentError> {
        points
            .iter()
            .map(|&[x, y]| {
                if x < self.grid.side_points && y < self.grid.side_points {
                    Ok(self.grid.index_of(x, y))
                } else {
                    Err(ExperimentError::Config(format!(
                        "point ({x}, {y}) outside a {0}x{0} grid",
                        self.grid.side_points
                    )))
                }
            })
            .collect()
    }

    pub fn scenario(
        &self,
        task_count: usize,
        locations: LocationMode,
        lengths: LengthMode,
    ) -> Result<Scenario, ExperimentError> {
        let candidates = if self.candidates.is_empty() {
            (0..self.grid.point_count())
                .filter(|&p| p != self.grid.base_index)
                .collect()
        } else {
            self.resolve_points(&self.candidates)?
        };
        let scenario = Scenario {
            task_count,
            locations,
            lengths,
            layout: self.resolve_points(&self.layout)?,
            candidates,
        };
        scenario.validate(&self.grid)?;
        Ok(scenario)
    }

    /// The sweep points this experiment runs, in output order.
    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>, ExperimentError> {
        let psi = self.agent.warmup_multiplier;
        let points = match self.kind {
            ExperimentKind::ThresholdSweep => self
                .psi_values
                .iter()
                .map(|&p| {
                    Ok(SweepPoint {
                        label: format!("psi{p}"),
                        warmup_multiplier: p,
                        scenario: self.scenario(self.task_count, self.locations, self.lengths)?,
                    })
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?,
            ExperimentKind::Geometry => self
                .geometry_variants
                .iter()
                .map(|&(loc, len)| {
                    let loc_label = match loc {
                        LocationMode::Fixed => "fixedloc",
                        LocationMode::Random => "randloc",
                    };
                    Ok(SweepPoint {
                        label: format!("{loc_label}_{len}"),
                        warmup_multiplier: psi,
                        scenario: self.scenario(self.task_count, loc, len)?,
                    })
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?,
            ExperimentKind::Density => self
                .task_counts
                .iter()
                .map(|&n| {
                    Ok(SweepPoint {
                        label: format!("tasks{n}"),
                        warmup_multiplier: psi,
                        scenario: self.scenario(n, self.locations, self.lengths)?,
                    })
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?,
        };
        if points.is_empty() {
            return Err(ExperimentError::Config(
                "experiment has no sweep points".into(),
            ));
        }
        Ok(points)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.grid.validate()?;
        self.agent.validate()?;
        self.schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config(
                "at least one seed is required".into(),
            ));
        }
        if self.window == 0 || self.report_every == 0 {
            return Err(ExperimentError::Config(
                "window and report_every must be positive".into(),
            ));
        }
        if let Budget::Episodes(0) = self.budget {
            return Err(ExperimentError::Config(
                "episode budget must be positive".into(),
            ));
        }
        if self.budget == Budget::UntilFloor && self.schedule.decrement_per_step <= 0.0 {
            return Err(ExperimentError::Config(
                "an until-floor budget needs a decaying schedule".into(),
            ));
        }
        self.sweep_points()?;
        Ok(())
    }
}

/// Separate random streams of one run.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Layout = 0,
    Init = 1,
    Explore = 2,
    Replay = 3,
}

/// Independent generator for `(seed, sweep point, purpose)`.
fn stream_rng(seed: u64, point: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((point as u64) << 8) | stream as u64);
    rng
}

/// Everything needed to train a team on one sweep point.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub env: Environment,
    pub point: SweepPoint,
    pub point_index: usize,
    pub seed: u64,
    pub schedule: EpsilonSchedule,
    pub agent_config: AgentConfig,
    pub team: DqnTeam,
    pub global_step: u64,
    /// Episodes completed before this process started, when resumed.
    pub first_episode: usize,
    pub records: Vec<EpisodeRecord>,
    layout_rng: ChaCha8Rng,
}

impl TrainingRun {
    pub fn new(
        spec: &ExperimentSpec,
        point: SweepPoint,
        point_index: usize,
        seed: u64,
    ) -> Result<Self, ExperimentError> {
        let env = Environment::new(spec.grid, spec.rewards)?;
        let agent_config = AgentConfig {
            warmup_multiplier: point.warmup_multiplier,
            ..spec.agent
        };
        let k = point.scenario.task_count;
        let mut init = stream_rng(seed, point_index, Stream::Init);
        let agents = (0..k)
            .map(|_| Agent::new(observation_len(k), agent_config, &mut init))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            env,
            team: DqnTeam::new(
                agents,
                stream_rng(seed, point_index, Stream::Explore),
                stream_rng(seed, point_index, Stream::Replay),
            ),
            layout_rng: stream_rng(seed, point_index, Stream::Layout),
            point,
            point_index,
            seed,
            schedule: spec.schedule,
            agent_config,
            global_step: 0,
            first_episode: 0,
            records: Vec::new(),
        })
    }

    pub fn run_episode(&mut self) -> Result<&EpisodeRecord, ExperimentError> {
        let tasks = self.point.scenario.sample(&mut self.layout_rng);
        let episode = self.first_episode + self.records.len();
        let record = run_episode(
            &self.env,
            &tasks,
            &mut self.team,
            &self.schedule,
            &mut self.global_step,
            episode,
        )?;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn train(&mut self, budget: Budget) -> Result<(), ExperimentError> {
        match budget {
            Budget::Episodes(n) => {
                for _ in 0..n {
                    self.run_episode()?;
                }
            }
            Budget::UntilFloor => {
                let floor_step = self.schedule.steps_to_floor();
                while self.global_step < floor_step {
                    self.run_episode()?;
                }
            }
        }
        Ok(())
    }

    /// Stand-alone sidecar describing this run's position.
    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            agent_config: self.agent_config,
            schedule: self.schedule,
            global_step: self.global_step,
            episodes_completed: self.first_episode + self.records.len(),
            grid: self.env.config,
            rewards: self.env.coefs,
            point: self.point.clone(),
            point_index: self.point_index,
            seed: self.seed,
            drone_count: self.team.agents.len(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), ExperimentError> {
        save_checkpoint(dir, &self.checkpoint_meta(), &self.team.agents)
    }

    /// Continues a saved run. Replay memories and optimiser moments are not
    /// checkpointed, so they restart empty; random streams are re-derived from
    /// the seed and the number of completed episodes.
    pub fn resume(dir: &Path) -> Result<Self, ExperimentError> {
        let (meta, agents) = load_checkpoint(dir)?;
        let env = Environment::new(meta.grid, meta.rewards)?;
        let offset = meta.episodes_completed as u64;
        let seed = meta.seed ^ offset.rotate_left(32);
        Ok(Self {
            env,
            team: DqnTeam::new(
                agents,
                stream_rng(seed, meta.point_index, Stream::Explore),
                stream_rng(seed, meta.point_index, Stream::Replay),
            ),
            layout_rng: stream_rng(seed, meta.point_index, Stream::Layout),
            point: meta.point,
            point_index: meta.point_index,
            seed: meta.seed,
            schedule: meta.schedule,
            agent_config: meta.agent_config,
            global_step: meta.global_step,
            first_episode: meta.episodes_completed,
            records: Vec::new(),
        })
    }
}

/// Runs a checkpointed team greedily (or at a fixed `epsilon`) without
/// learning, on scenarios drawn from the checkpoint's sweep point.
pub fn evaluate_checkpoint(
    dir: &Path,
    episodes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<EpisodeRecord>, ExperimentError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(ExperimentError::Config(format!(
            "epsilon {epsilon} outside [0, 1]"
        )));
    }
    let (meta, agents) = load_checkpoint(dir)?;
    let env = Environment::new(meta.grid, meta.rewards)?;
    let mut team = DqnTeam::new(
        agents,
        stream_rng(seed, meta.point_index, Stream::Explore),
        stream_rng(seed, meta.point_index, Stream::Replay),
    );
    team.learning = false;
    let mut layout = stream_rng(seed, meta.point_index, Stream::Layout);
    let schedule = EpsilonSchedule {
        start: epsilon,
        decrement_per_step: 0.0,
        floor: epsilon,
    };
    let mut step = 0;
    (0..episodes)
        .map(|e| {
            let tasks = meta.point.scenario.sample(&mut layout);
            run_episode(&env, &tasks, &mut team, &schedule, &mut step, e)
        })
        .collect()
}

/// JSON sidecar stored next to the per-drone parameter files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub agent_config: AgentConfig,
    pub schedule: EpsilonSchedule,
    pub global_step: u64,
    pub episodes_completed: usize,
    pub grid: GridConfig,
    pub rewards: RewardCoefs,
    pub point: SweepPoint,
    pub point_index: usize,
    pub seed: u64,
    pub drone_count: usize,
}

const CHECKPOINT_META: &str = "agent.json";

fn network_file(dir: &Path, drone: usize, role: &str) -> PathBuf {
    dir.join(format!("drone{drone}_{role}.bin"))
}

pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    agents: &[Agent],
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (k, agent) in agents.iter().enumerate() {
        for (role, net) in [("policy", agent.policy()), ("target", agent.target())] {
            let path = network_file(dir, k, role);
            fs::write(&path, net.to_bytes()).map_err(io_err(&path))?;
        }
    }
    write_json(&dir.join(CHECKPOINT_META), meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, Vec<Agent>), ExperimentError> {
    let meta_path = dir.join(CHECKPOINT_META);
    let meta: CheckpointMeta = read_json(&meta_path)?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(parse_err(
            &meta_path,
            format!("unsupported checkpoint schema {}", meta.schema_version),
        ));
    }
    let expected = observation_len(meta.drone_count);
    let agents = (0..meta.drone_count)
        .map(|k| {
            let load = |role: &str| -> Result<Mlp, ExperimentError> {
                let path = network_file(dir, k, role);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let net = Mlp::from_bytes(&bytes).map_err(|e| parse_err(&path, e))?;
                if net.input_len() != expected {
                    return Err(parse_err(
                        &path,
                        format!("input width {} != {expected}", net.input_len()),
                    ));
                }
                Ok(net)
            };
            Ok(Agent::from_networks(
                meta.agent_config,
                load("policy")?,
                load("target")?,
            )?)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok((meta, agents))
}

/// Outcome of one `(point, seed)` training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub point: SweepPoint,
    pub point_index: usize,
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    pub series: MetricsSeries,
}

impl RunResult {
    /// Episode-log file name inside an experiment's `episodes/` directory.
    pub fn episodes_file(&self) -> String {
        format!("{}_seed{}.jsonl", self.point.label, self.seed)
    }
}

pub fn run_point(
    spec: &ExperimentSpec,
    point: SweepPoint,
    point_index: usize,
    seed: u64,
) -> Result<RunResult, ExperimentError> {
    let mut run = TrainingRun::new(spec, point, point_index, seed)?;
    run.train(spec.budget)?;
    let series = derive_series(&run.records, spec.window, spec.report_every)?;
    Ok(RunResult {
        point: run.point,
        point_index,
        seed,
        records: run.records,
        series,
    })
}

/// Everything needed to repeat one training run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub point: SweepPoint,
    pub point_index: usize,
    pub seed: u64,
}

impl RunManifest {
    pub fn new(spec: &ExperimentSpec, point: SweepPoint, point_index: usize, seed: u64) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            spec: spec.clone(),
            point,
            point_index,
            seed,
        }
    }

    pub fn training_run(&self) -> Result<TrainingRun, ExperimentError> {
        TrainingRun::new(&self.spec, self.point.clone(), self.point_index, self.seed)
    }

    pub fn run(&self) -> Result<RunResult, ExperimentError> {
        run_point(&self.spec, self.point.clone(), self.point_index, self.seed)
    }
}

/// Runs every `(sweep point, seed)` pair on up to `jobs` threads. Results come
/// back ordered by point, then seed, whatever the thread count.
pub fn run_experiment(
    spec: &ExperimentSpec,
    jobs: usize,
) -> Result<Vec<RunResult>, ExperimentError> {
    spec.validate()?;
    let points = spec.sweep_points()?;
    let work: Vec<(usize, SweepPoint, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| spec.seeds.iter().map(move |&s| (i, p.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        work.into_par_iter()
            .map(|(i, p, s)| run_point(spec, p, i, s))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes: usize,
    pub final_epsilon: f64,
    pub success_rate: f64,
    pub avg_success_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub label: String,
    pub warmup_multiplier: usize,
    pub task_count: usize,
    pub runs: Vec<SeedSummary>,
    pub mean_success_rate: f64,
    pub std_success_rate: f64,
    /// Mean over the seeds that had at least one success.
    pub mean_avg_success_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub window: usize,
    pub points: Vec<PointSummary>,
}

pub fn summarize(kind: ExperimentKind, window: usize, results: &[RunResult]) -> ExperimentSummary {
    let mut points: Vec<PointSummary> = Vec::new();
    for r in results {
        let last = r.series.last();
        let run = SeedSummary {
            seed: r.seed,
            episodes: r.records.len(),
            final_epsilon: last.map_or(0.0, |p| p.epsilon),
            success_rate: last.map_or(0.0, |p| p.success_rate),
            avg_success_reward: last.and_then(|p| p.avg_success_reward),
        };
        match points.iter_mut().find(|p| p.label == r.point.label) {
            Some(p) => p.runs.push(run),
            None => points.push(PointSummary {
                label: r.point.label.clone(),
                warmup_multiplier: r.point.warmup_multiplier,
                task_count: r.point.scenario.task_count,
                runs: vec![run],
                mean_success_rate: 0.0,
                std_success_rate: 0.0,
                mean_avg_success_reward: None,
            }),
        }
    }
    for p in &mut points {
        let rates: Vec<f64> = p.runs.iter().map(|r| r.success_rate).collect();
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        p.mean_success_rate = mean;
        p.std_success_rate = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let rewards: Vec<f64> = p.runs.iter().filter_map(|r| r.avg_success_reward).collect();
        p.mean_avg_success_reward =
            (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64);
    }
    ExperimentSummary {
        schema_version: METRICS_SCHEMA_VERSION,
        kind,
        window,
        points,
    }
}

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 8] = [
    "schema_version",
    "sweep_point",
    "seed",
    "window_end_episode",
    "epsilon",
    "success_rate",
    "avg_success_reward",
    "episodes",
];

/// Writes `metrics.csv` rows for each run. An absent average is an empty
/// field.
pub fn write_metrics<W: Write>(writer: W, results: &[RunResult]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_COLUMNS)?;
    for r in results {
        for p in &r.series.points {
            w.write_record([
                METRICS_SCHEMA_VERSION.to_string(),
                r.point.label.clone(),
                r.seed.to_string(),
                p.window_end_episode.to_string(),
                p.epsilon.to_string(),
                p.success_rate.to_string(),
                p.avg_success_reward
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                p.episodes.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, results: &[RunResult]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_metrics(BufWriter::new(file), results).map_err(|e| parse_err(path, e))
}

pub fn write_episodes(path: &Path, records: &[EpisodeRecord]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| parse_err(path, e))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, ExperimentError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|e| parse_err(path, e))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

/// Writes `metrics.csv`, `summary.json` and `episodes/*.jsonl` under `dir`.
pub fn persist_results(
    dir: &Path,
    kind: ExperimentKind,
    window: usize,
    results: &[RunResult],
) -> Result<ExperimentSummary, ExperimentError> {
    let episodes_dir = dir.join("episodes");
    fs::create_dir_all(&episodes_dir).map_err(io_err(&episodes_dir))?;
    write_metrics_csv(&dir.join("metrics.csv"), results)?;
    for r in results {
        write_episodes(&episodes_dir.join(r.episodes_file()), &r.records)?;
    }
    let summary = summarize(kind, window, results);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(success: bool, reward: f64) -> EpisodeRecord {
        EpisodeRecord {
            episode: 0,
            success,
            accumulated_reward: reward,
            steps: 1,
            final_batteries: vec![],
            epsilon_at_start: 0.5,
            epsilon_at_end: 0.5,
            tasks: vec![],
        }
    }

    #[test]
    fn success_rate_examples() {
        let s = |b: &[bool]| {
            success_rate(&b.iter().map(|&x| record(x, 0.0)).collect::<Vec<_>>()).unwrap()
        };
        assert_eq!(s(&[true, false, true, true]), 0.75);
        assert_eq!(s(&[false, false]), 0.0);
        assert_eq!(s(&[true, true, true]), 1.0);
        assert!(matches!(
            success_rate(&[]),
            Err(ExperimentError::EmptyWindow)
        ));
    }

    #[test]
    fn avg_success_reward_examples() {
        let rs = vec![record(true, 10.0), record(false, 99.0), record(true, 20.0)];
        assert_eq!(avg_success_reward(&rs), Some(15.0));
        assert_eq!(avg_success_reward(&[record(false, 3.0)]), None);
        assert_eq!(avg_success_reward(&[record(true, 7.5)]), Some(7.5));
    }

    #[test]
    fn series_windows() {
        let rs: Vec<_> = (0..25).map(|i| record(i % 5 != 0, i as f64)).collect();
        let s = derive_series(&rs, 10, 5).unwrap();
        let ends: Vec<_> = s.points.iter().map(|p| p.window_end_episode).collect();
        assert_eq!(ends, vec![10, 15, 20, 25]);
        assert!(s.points.iter().all(|p| p.episodes == 10));
        assert_eq!(s.points[0].success_rate, 0.8);

        let short = derive_series(&rs[..3], 10, 5).unwrap();
        assert_eq!(short.points.len(), 1);
        assert_eq!(short.points[0].episodes, 3);
    }

    #[test]
    fn scenario_sampling() {
        let spec = ExperimentSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fixed = spec
            .scenario(4, LocationMode::Fixed, LengthMode::Uniform(1, 5))
            .unwrap();
        for _ in 0..50 {
            let tasks = fixed.sample(&mut rng);
            assert_eq!(
                tasks.iter().map(|t| t.location).collect::<Vec<_>>(),
                fixed.layout
            );
            assert!(tasks.iter().all(|t| (1..=5).contains(&t.length)));
        }
        let random = spec
            .scenario(10, LocationMode::Random, LengthMode::Fixed(5))
            .unwrap();
        for _ in 0..50 {
            let tasks = random.sample(&mut rng);
            assert_eq!(tasks.len(), 10);
            let mut locs: Vec<_> = tasks.iter().map(|t| t.location).collect();
            locs.sort_unstable();
            locs.dedup();
            assert_eq!(locs.len(), 10);
            assert!(!locs.contains(&0));
        }
        assert!(spec
            .scenario(5, LocationMode::Fixed, LengthMode::Fixed(5))
            .is_err());
        assert!(spec
            .scenario(25, LocationMode::Random, LengthMode::Fixed(5))
            .is_err());
    }

    #[test]
    fn sweep_point_expansion() {
        let t = ExperimentSpec::preset(ExperimentKind::ThresholdSweep);
        let labels: Vec<_> = t
            .sweep_points()
            .unwrap()
            .into_iter()
            .map(|p| p.label)
            .collect();
        assert_eq!(labels, ["psi1", "psi2", "psi5", "psi10"]);
        assert_eq!(t.schedule.floor, 0.15);

        let d = ExperimentSpec::preset(ExperimentKind::Density);
        let counts: Vec<_> = d
            .sweep_points()
            .unwrap()
            .into_iter()
            .map(|p| p.scenario.task_count)
            .collect();
        assert_eq!(counts, (2..=10).collect::<Vec<_>>());

        let g = ExperimentSpec::preset(ExperimentKind::Geometry);
        assert_eq!(g.sweep_points().unwrap().len(), 3);
    }
}

//! Grid environment for a mission-oriented drone network.
//!
//! Trajectory points are numbered row-major: index `i` sits at column
//! `i % side` and row `i / side`. Rows grow "up", so `MoveUp` adds one to the
//! row. Every drone acts once per time step and all drones act simultaneously.

use std::f64::consts::SQRT_2;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{scaled_rates, PowerRates};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected {expected} joint actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("cannot step a terminal state")]
    Terminal,
}

/// The ten per-drone actions. The discriminant is the network output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    MoveUp = 0,
    MoveDown = 1,
    MoveLeft = 2,
    MoveRight = 3,
    MoveUpLeft = 4,
    MoveUpRight = 5,
    MoveDownLeft = 6,
    MoveDownRight = 7,
    Hover = 8,
    Execute = 9,
}

impl Action {
    pub const COUNT: usize = 10;

    pub const ALL: [Action; Action::COUNT] = [
        Action::MoveUp,
        Action::MoveDown,
        Action::MoveLeft,
        Action::MoveRight,
        Action::MoveUpLeft,
        Action::MoveUpRight,
        Action::MoveDownLeft,
        Action::MoveDownRight,
        Action::Hover,
        Action::Execute,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    /// Column/row displacement of a move, `None` for hover and execute.
    pub fn offset(self) -> Option<(i64, i64)> {
        match self {
            Action::MoveUp => Some((0, 1)),
            Action::MoveDown => Some((0, -1)),
            Action::MoveLeft => Some((-1, 0)),
            Action::MoveRight => Some((1, 0)),
            Action::MoveUpLeft => Some((-1, 1)),
            Action::MoveUpRight => Some((1, 1)),
            Action::MoveDownLeft => Some((-1, -1)),
            Action::MoveDownRight => Some((1, -1)),
            Action::Hover | Action::Execute => None,
        }
    }

    pub fn is_diagonal(self) -> bool {
        matches!(self.offset(), Some((dx, dy)) if dx != 0 && dy != 0)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Trajectory points per axis.
    pub side_points: usize,
    /// Distance between neighbouring points along an axis.
    pub cell_side: f64,
    pub base_index: usize,
    pub battery_capacity: f64,
    pub episode_length: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            side_points: 5,
            cell_side: 1.0,
            base_index: 0,
            battery_capacity: 1800.0,
            episode_length: 600,
        }
    }
}

impl GridConfig {
    pub fn point_count(&self) -> usize {
        self.side_points * self.side_points
    }

    /// Longest distance a drone covers in one time step: a square's diagonal.
    pub fn d_max(&self) -> f64 {
        self.cell_side * SQRT_2
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.side_points, index / self.side_points)
    }

    pub fn index_of(&self, col: usize, row: usize) -> usize {
        row * self.side_points + col
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        let dx = ax as f64 - bx as f64;
        let dy = ay as f64 - by as f64;
        self.cell_side * dx.hypot(dy)
    }

    /// Destination of a move, or `None` if it would leave the grid.
    pub fn neighbour(&self, index: usize, action: Action) -> Option<usize> {
        let (dx, dy) = action.offset()?;
        let (x, y) = self.coords(index);
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        let side = self.side_points as i64;
        if (0..side).contains(&nx) && (0..side).contains(&ny) {
            Some(self.index_of(nx as usize, ny as usize))
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.side_points == 0 {
            return Err(WorldError::Config("side_points must be positive".into()));
        }
        if !(self.cell_side.is_finite() && self.cell_side > 0.0) {
            return Err(WorldError::Config("cell_side must be positive".into()));
        }
        if self.base_index >= self.point_count() {
            return Err(WorldError::Config(format!(
                "base_index {} outside a grid of {} points",
                self.base_index,
                self.point_count()
            )));
        }
        if !(self.battery_capacity.is_finite() && self.battery_capacity > 0.0) {
            return Err(WorldError::Config(
                "battery_capacity must be positive".into(),
            ));
        }
        if self.episode_length == 0 {
            return Err(WorldError::Config("episode_length must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the terminal terms of the shared reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCoefs {
    /// Multiplies the remaining-energy ratio on a successful finish.
    pub energy_weight: f64,
    /// Multiplies the stranded-drone count when tasks finish but some drone
    /// cannot make it home.
    pub stranded_weight: f64,
}

impl Default for RewardCoefs {
    fn default() -> Self {
        Self {
            energy_weight: 1.0,
            stranded_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub location: usize,
    pub length: u32,
}

/// State of the world at one time step.
///
/// Task `i` and drone `i` share an index only by position in the lists; no
/// drone is bound to a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    #[serde(rename = "L_task")]
    pub task_locations: Vec<usize>,
    #[serde(rename = "L_drone")]
    pub drone_locations: Vec<usize>,
    /// Actions taken on the previous step (`Hover` after a reset).
    #[serde(rename = "A")]
    pub last_actions: Vec<Action>,
    #[serde(rename = "tau")]
    pub remaining: Vec<u32>,
    #[serde(rename = "B")]
    pub batteries: Vec<f64>,
    /// Original task lengths, needed to normalise `remaining`.
    #[serde(rename = "T")]
    pub task_lengths: Vec<u32>,
    #[serde(rename = "t")]
    pub clock: u32,
    pub done: bool,
}

impl WorldState {
    pub fn drone_count(&self) -> usize {
        self.drone_locations.len()
    }

    pub fn task_count(&self) -> usize {
        self.task_locations.len()
    }

    pub fn remaining_total(&self) -> u64 {
        self.remaining.iter().map(|&r| u64::from(r)).sum()
    }

    fn task_at(&self, location: usize) -> Option<usize> {
        self.task_locations.iter().position(|&l| l == location)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: WorldState,
    pub reward: f64,
    pub done: bool,
    /// Only meaningful when `done`.
    pub success: bool,
    /// Set when the episode ended because every task finished, as opposed to
    /// running out of time.
    pub tasks_finished: bool,
}

/// Energy one action draws during a single time step.
pub fn action_cost(action: Action, at_base: bool, rates: &PowerRates, cell_side: f64) -> f64 {
    match action {
        Action::Execute => rates.hover + rates.facilities,
        Action::Hover if at_base => 0.0,
        Action::Hover => rates.hover,
        a if a.is_diagonal() => rates.forward,
        _ => {
            // Fly the straight leg, then hover out the rest of the step.
            let travelled = cell_side / (cell_side * SQRT_2);
            rates.forward * travelled + rates.hover * (1.0 - travelled)
        }
    }
}

/// Energy needed to fly straight home from `location` at one `d_max` per step.
pub fn return_energy(location: usize, config: &GridConfig, rates: &PowerRates) -> f64 {
    config.distance(location, config.base_index) / config.d_max() * rates.forward
}

/// Per-step task execution progress: total decrease in remaining lengths.
pub fn execution_progress(prev: &WorldState, next: &WorldState) -> f64 {
    prev.remaining
        .iter()
        .zip(&next.remaining)
        .map(|(&a, &b)| f64::from(a.saturating_sub(b)))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub config: GridConfig,
    pub rates: PowerRates,
    pub coefs: RewardCoefs,
}

impl Environment {
    pub fn new(config: GridConfig, coefs: RewardCoefs) -> Result<Self, WorldError> {
        Self::with_rates(config, scaled_rates(), coefs)
    }

    pub fn with_rates(
        config: GridConfig,
        rates: PowerRates,
        coefs: RewardCoefs,
    ) -> Result<Self, WorldError> {
        config.validate()?;
        Ok(Self {
            config,
            rates,
            coefs,
        })
    }

    /// Places every drone at the base with a full battery.
    pub fn reset(&self, tasks: &[TaskSpec], drone_count: usize) -> Result<WorldState, WorldError> {
        let cfg = &self.config;
        if tasks.is_empty() {
            return Err(WorldError::Config(
                "a mission needs at least one task".into(),
            ));
        }
        if drone_count != tasks.len() {
            return Err(WorldError::Config(format!(
                "{drone_count} drones for {} tasks; the network fields one drone per task",
                tasks.len()
            )));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.location >= cfg.point_count() {
                return Err(WorldError::Config(format!(
                    "task {i} at point {} outside the grid",
                    t.location
                )));
            }
            if t.location == cfg.base_index {
                return Err(WorldError::Config(format!(
                    "task {i} placed on the base station"
                )));
            }
            if t.length == 0 {
                return Err(WorldError::Config(format!("task {i} has zero length")));
            }
            if tasks[..i].iter().any(|o| o.location == t.location) {
                return Err(WorldError::Config(format!(
                    "two tasks share point {}",
                    t.location
                )));
            }
        }
        Ok(WorldState {
            task_locations: tasks.iter().map(|t| t.location).collect(),
            drone_locations: vec![cfg.base_index; drone_count],
            last_actions: vec![Action::Hover; drone_count],
            remaining: tasks.iter().map(|t| t.length).collect(),
            batteries: vec![cfg.battery_capacity; drone_count],
            task_lengths: tasks.iter().map(|t| t.length).collect(),
            clock: 0,
            done: false,
        })
    }

    /// The action actually carried out: moves off the grid degrade to hover.
    pub fn effective_action(&self, location: usize, action: Action) -> Action {
        if action.offset().is_some() && self.config.neighbour(location, action).is_none() {
            Action::Hover
        } else {
            action
        }
    }

    pub fn return_energy(&self, location: usize) -> f64 {
        return_energy(location, &self.config, &self.rates)
    }

    /// `(all tasks finished, every drone can still reach the base)`.
    pub fn mission_complete(&self, state: &WorldState) -> (bool, bool) {
        let tasks_done = state.remaining.iter().all(|&r| r == 0);
        let can_return = state
            .drone_locations
            .iter()
            .zip(&state.batteries)
            .all(|(&loc, &b)| b >= self.return_energy(loc));
        (tasks_done, can_return)
    }

    /// Mean battery level as a fraction of capacity.
    pub fn remaining_energy_ratio(&self, state: &WorldState) -> f64 {
        let total: f64 = state.batteries.iter().sum();
        total / (state.drone_count() as f64 * self.config.battery_capacity)
    }

    /// Drones whose battery no longer covers the trip home.
    pub fn stranded_count(&self, state: &WorldState) -> usize {
        state
            .drone_locations
            .iter()
            .zip(&state.batteries)
            .filter(|(&loc, &b)| b < self.return_energy(loc))
            .count()
    }

    /// Shared reward for the transition `prev -> next`.
    pub fn reward(&self, prev: &WorldState, next: &WorldState) -> f64 {
        let progress = execution_progress(prev, next);
        match self.mission_complete(next) {
            (true, true) => progress + self.coefs.energy_weight * self.remaining_energy_ratio(next),
            (true, false) => {
                progress - self.coefs.stranded_weight * self.stranded_count(next) as f64
            }
            (false, _) => progress,
        }
    }

    pub fn step(&self, state: &WorldState, joint: &[Action]) -> Result<StepOutcome, WorldError> {
        if state.done {
            return Err(WorldError::Terminal);
        }
        let k = state.drone_count();
        if joint.len() != k {
            return Err(WorldError::ActionCount {
                expected: k,
                got: joint.len(),
            });
        }

        let mut next = state.clone();
        for (drone, &requested) in joint.iter().enumerate() {
            let here = state.drone_locations[drone];
            let action = self.effective_action(here, requested);
            let at_base = here == self.config.base_index;
            next.batteries[drone] -=
                action_cost(action, at_base, &self.rates, self.config.cell_side);
            if let Some(dest) = self.config.neighbour(here, action) {
                next.drone_locations[drone] = dest;
            }
            next.last_actions[drone] = action;
            // Lower ids are credited first when several drones share a task.
            if action == Action::Execute {
                if let Some(task) = state.task_at(here) {
                    next.remaining[task] = next.remaining[task].saturating_sub(1);
                }
            }
        }
        next.clock += 1;

        let reward = self.reward(state, &next);
        let (tasks_finished, can_return) = self.mission_complete(&next);
        let done = tasks_finished || next.clock >= self.config.episode_length;
        next.done = done;
        Ok(StepOutcome {
            next_state: next,
            reward,
            done,
            success: tasks_finished && can_return,
            tasks_finished,
        })
    }

    pub fn observation_len(&self, drone_count: usize) -> usize {
        observation_len(drone_count)
    }

    pub fn encode_observation(&self, state: &WorldState) -> Vec<f64> {
        encode_observation(state, &self.config)
    }
}

/// Length of an encoded observation for `k` drones and `k` tasks.
pub fn observation_len(k: usize) -> usize {
    16 * k
}

/// Flattens a state into the network input.
///
/// Layout, in order:
/// 1. task `(x, y)` pairs, coordinates divided by `side - 1`
/// 2. drone `(x, y)` pairs, same normalisation
/// 3. one-hot of each drone's last action, ten wide per drone
/// 4. per task, remaining / original length
/// 5. per drone, battery / capacity
pub fn encode_observation(state: &WorldState, config: &GridConfig) -> Vec<f64> {
    let k = state.drone_count();
    let mut out = Vec::with_capacity(observation_len(k));
    let scale = if config.side_points > 1 {
        1.0 / (config.side_points - 1) as f64
    } else {
        0.0
    };
    let push_point = |out: &mut Vec<f64>, p: usize| {
        let (x, y) = config.coords(p);
        out.push(x as f64 * scale);
        out.push(y as f64 * scale);
    };
    for &p in &state.task_locations {
        push_point(&mut out, p);
    }
    for &p in &state.drone_locations {
        push_point(&mut out, p);
    }
    for &a in &state.last_actions {
        let start = out.len();
        out.resize(start + Action::COUNT, 0.0);
        out[start + a.index()] = 1.0;
    }
    for (&r, &len) in state.remaining.iter().zip(&state.task_lengths) {
        out.push(if len == 0 {
            0.0
        } else {
            f64::from(r) / f64::from(len)
        });
    }
    for &b in &state.batteries {
        out.push(b / config.battery_capacity);
    }
    out
}

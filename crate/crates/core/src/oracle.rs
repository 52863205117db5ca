//! Exhaustive search over joint-action sequences on tiny instances.
//!
//! Gives the exact best accumulated reward reachable within a fixed horizon,
//! which bounds what any learned policy can collect on the same instance.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::world::{Action, Environment, StepOutcome, TaskSpec, WorldError, WorldState};

/// Largest number of leaf sequences (`10^(K * horizon)`) the search accepts.
pub const NODE_BUDGET: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("search needs about {estimate:.3e} nodes, over the budget of {budget:.0e}")]
    BudgetExceeded { estimate: f64, budget: f64 },
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub best_accumulated_reward: f64,
    /// `best_action_sequences[k]` is drone `k`'s action list. Shorter than the
    /// horizon when the mission finishes early.
    pub best_action_sequences: Vec<Vec<Action>>,
    /// Per-step rewards along the best sequence.
    pub reward_trace: Vec<f64>,
    pub explored_nodes: u64,
}

impl OracleResult {
    /// Joint action taken at each step of the best sequence.
    pub fn joint_actions(&self) -> Vec<Vec<Action>> {
        let steps = self.best_action_sequences.first().map_or(0, Vec::len);
        (0..steps)
            .map(|t| {
                self.best_action_sequences
                    .iter()
                    .map(|seq| seq[t])
                    .collect()
            })
            .collect()
    }
}

/// The parts of a state that influence later transitions and rewards. The
/// previous joint action does not, so it is left out.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct StateKey {
    drones: Vec<usize>,
    remaining: Vec<u32>,
    batteries: Vec<u64>,
    clock: u32,
}

impl StateKey {
    fn of(s: &WorldState) -> Self {
        Self {
            drones: s.drone_locations.clone(),
            remaining: s.remaining.clone(),
            batteries: s.batteries.iter().map(|b| b.to_bits()).collect(),
            clock: s.clock,
        }
    }
}

/// Options for [`solve_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    /// Reuse the value of a state already solved at the same depth.
    pub transpositions: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            transpositions: true,
        }
    }
}

pub fn estimate_nodes(drone_count: usize, horizon: u32) -> f64 {
    10f64.powf((drone_count as f64) * f64::from(horizon))
}

/// Best accumulated reward over all joint-action sequences of `horizon` steps.
pub fn solve_exhaustive(
    env: &Environment,
    tasks: &[TaskSpec],
    drone_count: usize,
    horizon: u32,
) -> Result<OracleResult, OracleError> {
    solve_with(
        env,
        tasks,
        drone_count,
        horizon,
        SearchOptions::default(),
        |_, _, _| {},
    )
}

/// Like [`solve_exhaustive`], calling `visit(prev, joint, outcome)` on every
/// transition the search expands.
pub fn solve_with<F>(
    env: &Environment,
    tasks: &[TaskSpec],
    drone_count: usize,
    horizon: u32,
    options: SearchOptions,
    mut visit: F,
) -> Result<OracleResult, OracleError>
where
    F: FnMut(&WorldState, &[Action], &StepOutcome),
{
    let estimate = estimate_nodes(drone_count, horizon);
    if estimate > NODE_BUDGET {
        return Err(OracleError::BudgetExceeded {
            estimate,
            budget: NODE_BUDGET,
        });
    }
    let root = env.reset(tasks, drone_count)?;
    let mut search = Search {
        env,
        joints: joint_actions(drone_count),
        memo: HashMap::new(),
        options,
        explored: 0,
        visit: &mut visit,
    };
    search.value(&root, horizon)?;

    // Walk the stored choices forward, summing in time order so a replay
    // reproduces the total bit for bit.
    let mut sequences = vec![Vec::new(); drone_count];
    let mut trace = Vec::new();
    let mut state = root;
    let mut depth = horizon;
    while depth > 0 && !state.done {
        let Some(&(_, Some(choice))) = search.memo.get(&(StateKey::of(&state), depth)) else {
            break;
        };
        let joint = &search.joints[choice];
        let outcome = env.step(&state, joint)?;
        for (seq, &a) in sequences.iter_mut().zip(joint) {
            seq.push(a);
        }
        trace.push(outcome.reward);
        state = outcome.next_state;
        depth -= 1;
    }
    let mut total = 0.0;
    for r in &trace {
        total += r;
    }
    Ok(OracleResult {
        best_accumulated_reward: total,
        best_action_sequences: sequences,
        reward_trace: trace,
        explored_nodes: search.explored,
    })
}

fn joint_actions(drone_count: usize) -> Vec<Vec<Action>> {
    let total = Action::COUNT.pow(drone_count as u32);
    (0..total)
        .map(|mut code| {
            // drone 0 is the most significant digit, so order is lexicographic
            let mut joint = vec![Action::Hover; drone_count];
            for slot in joint.iter_mut().rev() {
                *slot = Action::ALL[code % Action::COUNT];
                code /= Action::COUNT;
            }
            joint
        })
        .collect()
}

type Memo = HashMap<(StateKey, u32), (f64, Option<usize>)>;

struct Search<'a, F> {
    env: &'a Environment,
    joints: Vec<Vec<Action>>,
    memo: Memo,
    options: SearchOptions,
    explored: u64,
    visit: &'a mut F,
}

impl<F> Search<'_, F>
where
    F: FnMut(&WorldState, &[Action], &StepOutcome),
{
    /// Best reward collectable from `state` in `depth` more steps. Results
    /// are always recorded for path reconstruction; they are only reused as
    /// transpositions when that option is on.
    fn value(&mut self, state: &WorldState, depth: u32) -> Result<f64, WorldError> {
        if depth == 0 || state.done {
            return Ok(0.0);
        }
        let key = (StateKey::of(state), depth);
        if self.options.transpositions {
            if let Some(&(v, _)) = self.memo.get(&key) {
                return Ok(v);
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut choice = None;
        for i in 0..self.joints.len() {
            let outcome = self.env.step(state, &self.joints[i])?;
            self.explored += 1;
            (self.visit)(state, &self.joints[i], &outcome);
            let v = outcome.reward + self.value(&outcome.next_state, depth - 1)?;
            if v > best {
                best = v;
                choice = Some(i);
            }
        }
        // Without transpositions a later visit may overwrite an entry with
        // the same value, which keeps reconstruction consistent.
        self.memo.entry(key).or_insert((best, choice));
        Ok(best)
    }
}

//! Per-drone deep Q-learning agent: epsilon-greedy selection, a ring replay
//! memory, a warm-up gate on learning, and a periodically synced target
//! network.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, Mlp, NnError};
use crate::world::Action;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DqnError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub batch_size: usize,
    /// Learning starts once more than `batch_size * warmup_multiplier`
    /// transitions are stored.
    pub warmup_multiplier: usize,
    /// Learn-steps between copies of the policy weights into the target.
    pub sync_period: u64,
    /// Bellman discount; unrelated to the reward's energy weight.
    pub discount: f64,
    pub hidden: [usize; 2],
    pub learning_rate: f64,
    pub replay_capacity: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup_multiplier: 5,
            sync_period: 200,
            discount: 0.95,
            hidden: [128, 128],
            learning_rate: 1e-3,
            replay_capacity: 50_000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |m: &str| Err(DqnError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_multiplier == 0 {
            return bad("warmup_multiplier must be positive");
        }
        if self.sync_period == 0 {
            return bad("sync_period must be positive");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.replay_capacity <= self.warmup_threshold() {
            return bad("replay_capacity must exceed batch_size * warmup_multiplier");
        }
        Ok(())
    }

    pub fn warmup_threshold(&self) -> usize {
        self.batch_size * self.warmup_multiplier
    }
}

/// Linearly decaying exploration rate, clamped at a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decrement_per_step: f64,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 0.5,
            decrement_per_step: 3e-6,
            floor: 0.2,
        }
    }
}

impl EpsilonSchedule {
    pub fn epsilon_at(&self, global_step: u64) -> f64 {
        (self.start - self.decrement_per_step * global_step as f64).max(self.floor)
    }

    /// First step at which the floor is reached.
    pub fn steps_to_floor(&self) -> u64 {
        if self.decrement_per_step <= 0.0 || self.start <= self.floor {
            return 0;
        }
        let mut step = ((self.start - self.floor) / self.decrement_per_step).floor() as u64;
        while self.epsilon_at(step) > self.floor {
            step += 1;
        }
        while step > 0 && self.epsilon_at(step - 1) <= self.floor {
            step -= 1;
        }
        step
    }

    pub fn validate(&self) -> Result<(), DqnError> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !(ok(self.start) && ok(self.floor) && self.floor <= self.start) {
            return Err(DqnError::Config(
                "epsilon schedule needs 0 <= floor <= start <= 1".into(),
            ));
        }
        if !(self.decrement_per_step.is_finite() && self.decrement_per_step >= 0.0) {
            return Err(DqnError::Config("epsilon decrement must be >= 0".into()));
        }
        Ok(())
    }
}

/// One stored experience. Observations are shared between the drones that
/// saw the same global state.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Arc<[f64]>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Arc<[f64]>,
    /// The episode ended because the mission finished; no bootstrap.
    pub terminal: bool,
}

/// Fixed-capacity ring; once full, each store overwrites the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `count` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<&Transition> {
        let count = count.min(self.items.len());
        index::sample(rng, self.items.len(), count)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Greedy choice over Q-values; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    policy: Mlp,
    target: Mlp,
    optimizer: Adam,
    memory: ReplayMemory,
    updates: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        observation_len: usize,
        config: AgentConfig,
        rng: &mut R,
    ) -> Result<Self, DqnError> {
        config.validate()?;
        let dims = [
            observation_len,
            config.hidden[0],
            config.hidden[1],
            Action::COUNT,
        ];
        let policy = Mlp::new(dims, rng)?;
        Self::from_networks(config, policy.clone(), policy)
    }

    /// Rebuilds an agent around saved networks with an empty memory and a
    /// fresh optimiser.
    pub fn from_networks(config: AgentConfig, policy: Mlp, target: Mlp) -> Result<Self, DqnError> {
        config.validate()?;
        if policy.dims() != target.dims() {
            return Err(NnError::ShapeMismatch(policy.dims(), target.dims()).into());
        }
        if policy.output_len() != Action::COUNT {
            return Err(DqnError::Config(format!(
                "network has {} outputs, expected {}",
                policy.output_len(),
                Action::COUNT
            )));
        }
        Ok(Self {
            optimizer: Adam::for_network(&policy, config.learning_rate),
            memory: ReplayMemory::new(config.replay_capacity),
            config,
            policy,
            target,
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn policy(&self) -> &Mlp {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut Mlp {
        &mut self.policy
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    /// Learn-steps that actually updated the policy.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn q_values(&self, observation: &[f64]) -> Result<Vec<f64>, DqnError> {
        Ok(self.policy.forward(observation)?)
    }

    pub fn select_action<R: Rng + ?Sized>(
        &self,
        observation: &[f64],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Action, DqnError> {
        if rng.random::<f64>() < epsilon {
            let i = rng.random_range(0..Action::COUNT);
            return Ok(Action::ALL[i]);
        }
        let q = self.q_values(observation)?;
        Ok(Action::ALL[argmax(&q)])
    }

    pub fn store(&mut self, t: Transition) {
        self.memory.push(t);
    }

    /// One replay update, or `None` while the memory is still warming up.
    pub fn learn_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>, DqnError> {
        if self.memory.len() <= self.config.warmup_threshold() {
            return Ok(None);
        }
        let batch = self.memory.sample(rng, self.config.batch_size);
        let width = self.policy.input_len();
        let rows = batch.len();
        let mut states = Vec::with_capacity(rows * width);
        let mut next_states = Vec::with_capacity(rows * width);
        let mut actions = Vec::with_capacity(rows);
        for t in &batch {
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
            actions.push(t.action.index());
        }
        let next_q = self.target.forward_batch(&next_states, rows)?;
        let targets: Vec<f64> = batch
            .iter()
            .zip(next_q.chunks_exact(Action::COUNT))
            .map(|(t, q)| {
                if t.terminal {
                    t.reward
                } else {
                    t.reward + self.config.discount * q.iter().copied().fold(f64::MIN, f64::max)
                }
            })
            .collect();
        let (loss, grads) = self.policy.backward_batch(&states, &actions, &targets)?;
        self.optimizer.step(&mut self.policy, &grads)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.sync_period) {
            self.target.copy_parameters_from(&self.policy)?;
        }
        Ok(Some(loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> AgentConfig {
        AgentConfig {
            batch_size: 4,
            warmup_multiplier: 2,
            sync_period: 3,
            hidden: [8, 8],
            replay_capacity: 100,
            ..AgentConfig::default()
        }
    }

    fn transition(tag: f64) -> Transition {
        Transition {
            state: Arc::from(vec![tag, 0.5]),
            action: Action::MoveUp,
            reward: tag,
            next_state: Arc::from(vec![0.5, tag]),
            terminal: false,
        }
    }

    #[test]
    fn epsilon_schedule_values() {
        let s = EpsilonSchedule {
            floor: 0.15,
            ..EpsilonSchedule::default()
        };
        assert_eq!(s.epsilon_at(0), 0.5);
        assert_eq!(s.epsilon_at(10_000_000), 0.15);
        assert!((s.epsilon_at(100_000) - 0.2).abs() < 1e-12);
        let mut last = 1.0;
        for step in (0..200_000).step_by(997) {
            let e = s.epsilon_at(step);
            assert!(e <= last && (0.15..=0.5).contains(&e));
            last = e;
        }
    }

    #[test]
    fn steps_to_floor_is_first_floor_step() {
        let s = EpsilonSchedule::default();
        let n = s.steps_to_floor();
        assert_eq!(s.epsilon_at(n), 0.2);
        assert!(s.epsilon_at(n - 1) > 0.2);
        assert!((99_990..=100_010).contains(&n), "{n}");
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut m = ReplayMemory::new(3);
        for i in 0..2 {
            m.push(transition(i as f64));
        }
        assert_eq!(m.len(), 2);
        for i in 2..4 {
            m.push(transition(i as f64));
        }
        assert_eq!(m.len(), 3);
        let rewards: Vec<f64> = m.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn sampled_items_are_stored_values() {
        let mut m = ReplayMemory::new(10);
        let t = transition(0.25);
        m.push(t.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.sample(&mut rng, 1), vec![&t]);
        for i in 0..9 {
            m.push(transition(i as f64));
        }
        let picked = m.sample(&mut rng, 5);
        assert_eq!(picked.len(), 5);
        for (i, a) in picked.iter().enumerate() {
            assert!(picked[i + 1..].iter().all(|b| !std::ptr::eq(*a, *b)));
        }
    }

    #[test]
    fn argmax_prefers_lowest_tie() {
        let mut q = vec![0.0; 10];
        q[2] = 5.0;
        q[7] = 5.0;
        assert_eq!(argmax(&q), 2);
    }

    #[test]
    fn greedy_follows_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agent = Agent::new(2, small_config(), &mut rng).unwrap();
        let net = agent.policy_mut();
        for p in net.params_mut() {
            *p = 0.0;
        }
        net.layer_mut(2).1[Action::Execute.index()] = 1.0;
        for _ in 0..50 {
            assert_eq!(
                agent.select_action(&[0.3, 0.7], 0.0, &mut rng).unwrap(),
                Action::Execute
            );
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agent = Agent::new(2, small_config(), &mut rng).unwrap();
        let draws = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[agent
                .select_action(&[0.0, 0.0], 1.0, &mut rng)
                .unwrap()
                .index()] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom, p = 0.001
        assert!(chi2 < 27.88, "{chi2} {counts:?}");
    }

    #[test]
    fn warmup_gate_is_strict() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = Agent::new(2, small_config(), &mut rng).unwrap();
        let before = agent.policy().clone();
        for i in 0..8 {
            agent.store(transition(i as f64));
            assert_eq!(agent.learn_step(&mut rng).unwrap(), None);
            assert_eq!(agent.policy(), &before);
        }
        agent.store(transition(8.0));
        assert!(agent.learn_step(&mut rng).unwrap().is_some());
        assert_ne!(agent.policy(), &before);
    }

    #[test]
    fn target_only_moves_on_sync() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = Agent::new(2, small_config(), &mut rng).unwrap();
        for i in 0..20 {
            agent.store(transition(i as f64 / 20.0));
        }
        let probe = [0.1, 0.9];
        let frozen = agent.target().forward(&probe).unwrap();
        agent.learn_step(&mut rng).unwrap();
        agent.learn_step(&mut rng).unwrap();
        assert_eq!(agent.target().forward(&probe).unwrap(), frozen);
        assert_ne!(agent.policy().forward(&probe).unwrap(), frozen);
        agent.learn_step(&mut rng).unwrap();
        assert_eq!(agent.updates(), 3);
        assert_eq!(
            agent.target().forward(&probe).unwrap(),
            agent.policy().forward(&probe).unwrap()
        );
    }

    #[test]
    fn terminal_target_is_reward() {
        // With a terminal transition the regression target ignores the
        // target network; replaying it drives Q(s, a) to r.
        let config = AgentConfig {
            batch_size: 1,
            warmup_multiplier: 1,
            sync_period: 1,
            hidden: [16, 16],
            replay_capacity: 10,
            ..AgentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = Agent::new(3, config, &mut rng).unwrap();
        let t = Transition {
            state: Arc::from(vec![0.2, -0.4, 0.6]),
            action: Action::Hover,
            reward: 1.5,
            next_state: Arc::from(vec![9.0, 9.0, 9.0]),
            terminal: true,
        };
        agent.store(t.clone());
        agent.store(t.clone());
        for _ in 0..500 {
            agent.learn_step(&mut rng).unwrap();
        }
        let q = agent.q_values(&t.state).unwrap()[Action::Hover.index()];
        assert!((q - 1.5).abs() < 0.05, "{q}");
    }

    #[test]
    fn agents_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = Agent::new(2, small_config(), &mut rng).unwrap();
        let b = Agent::new(2, small_config(), &mut rng).unwrap();
        let probe = [0.4, 0.4];
        let before = b.q_values(&probe).unwrap();
        for i in 0..20 {
            a.store(transition(i as f64));
            a.learn_step(&mut rng).unwrap();
        }
        assert_eq!(b.q_values(&probe).unwrap(), before);
        assert!(b.memory().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        for bad in [
            AgentConfig {
                batch_size: 0,
                ..AgentConfig::default()
            },
            AgentConfig {
                discount: 1.0,
                ..AgentConfig::default()
            },
            AgentConfig {
                replay_capacity: 160,
                ..AgentConfig::default()
            },
            AgentConfig {
                sync_period: 0,
                ..AgentConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

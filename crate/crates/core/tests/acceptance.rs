//! Acceptance checks, one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the terminal.
//!
//! Criteria 6 to 8 train full teams and take over an hour on one core.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dronenet_core::dqn::{Agent, AgentConfig, EpsilonSchedule, Transition};
use dronenet_core::energy::{
    forward_power, hover_power, scaled_rates, solve_induced_velocity, PhysicsParams,
};
use dronenet_core::experiments::{
    run_experiment, Budget, ExperimentKind, ExperimentSpec, LengthMode, LocationMode, RunManifest,
    RunResult,
};
use dronenet_core::nn::Mlp;
use dronenet_core::oracle::{solve_with, SearchOptions};
use dronenet_core::world::{Action, Environment, GridConfig, RewardCoefs, TaskSpec, WorldState};

/// High-precision evaluation of the power model at the default parameters.
const ORACLE_INDUCED: f64 = 3.820_289_173_503_824_1;
const ORACLE_HOVER: f64 = 185.943_949_623_187_59;
const ORACLE_FORWARD: f64 = 114.857_152_238_622_76;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn scaled_rate_fidelity() -> Verdict {
    let r = scaled_rates();
    let b = GridConfig::default().battery_capacity;
    let pass = r.hover == 4.0 && r.forward == 2.5 && r.facilities == 3.0 && b == 1800.0;
    verdict(
        pass,
        format!(
            "hover {} forward {} facilities {} battery {b}",
            r.hover, r.forward, r.facilities
        ),
    )
}

fn physics_correctness() -> Verdict {
    let start = Instant::now();
    let p = PhysicsParams::default();
    let (vs, hover) = match (solve_induced_velocity(&p), hover_power(&p)) {
        (Ok(v), Ok(h)) => (v, h),
        (a, b) => return verdict(false, format!("{a:?} {b:?}")),
    };
    let forward = forward_power(&p, vs).unwrap_or(f64::NAN);
    let residual = (vs - p.induced_velocity_rhs(vs)).abs();
    let errs = [
        rel(vs, ORACLE_INDUCED),
        rel(hover, ORACLE_HOVER),
        rel(forward, ORACLE_FORWARD),
    ];
    let elapsed = start.elapsed();
    let pass =
        residual <= 1e-9 && errs.iter().all(|&e| e <= 1e-9) && elapsed < Duration::from_secs(1);
    verdict(
        pass,
        format!(
            "residual {residual:.1e}, relative errors {:.1e}/{:.1e}/{:.1e}, {elapsed:.2?}",
            errs[0], errs[1], errs[2]
        ),
    )
}

/// The shared reward written out directly from its definition: progress,
/// plus the mean battery fraction on success, minus the number of drones
/// that cannot get home when every task is done but some are stranded.
fn transcribed_reward(prev: &WorldState, next: &WorldState, side: usize) -> f64 {
    let capacity = 1800.0;
    let forward = 2.5;
    let d_max = 2f64.sqrt();
    let progress: f64 = (0..prev.remaining.len())
        .map(|i| f64::from(prev.remaining[i] - next.remaining[i]))
        .sum();
    let tasks_done = next.remaining.iter().all(|&r| r == 0);
    let mut stranded = 0usize;
    let mut energy = 0.0;
    for (&loc, &b) in next.drone_locations.iter().zip(&next.batteries) {
        let (x, y) = ((loc % side) as f64, (loc / side) as f64);
        let home = (x * x + y * y).sqrt() / d_max * forward;
        if b < home {
            stranded += 1;
        }
        energy += b;
    }
    let ratio = energy / (next.batteries.len() as f64 * capacity);
    if tasks_done && stranded == 0 {
        progress + ratio
    } else if tasks_done {
        progress - stranded as f64
    } else {
        progress
    }
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let side = 3;
    let env = Environment::new(
        GridConfig {
            side_points: side,
            ..GridConfig::default()
        },
        RewardCoefs::default(),
    )
    .expect("3x3 environment");
    let mut instances: Vec<Vec<TaskSpec>> = Vec::new();
    for a in 1..9 {
        for la in 1..=2 {
            instances.push(vec![TaskSpec {
                location: a,
                length: la,
            }]);
            for b in (a + 1)..9 {
                for lb in 1..=2 {
                    instances.push(vec![
                        TaskSpec {
                            location: a,
                            length: la,
                        },
                        TaskSpec {
                            location: b,
                            length: lb,
                        },
                    ]);
                }
            }
        }
    }
    let (mut checked, mut transitions, mut mismatches, mut replay_failures) = (0, 0u64, 0u64, 0);
    for tasks in &instances {
        for horizon in 1..=4 {
            let k = tasks.len();
            let result = solve_with(
                &env,
                tasks,
                k,
                horizon,
                SearchOptions::default(),
                |prev, _, out| {
                    transitions += 1;
                    let expected = transcribed_reward(prev, &out.next_state, side);
                    if expected.to_bits() != out.reward.to_bits() {
                        mismatches += 1;
                    }
                },
            );
            let Ok(result) = result else {
                replay_failures += 1;
                continue;
            };
            let mut s = env.reset(tasks, k).expect("valid instance");
            let mut total = 0.0;
            for joint in result.joint_actions() {
                let out = env.step(&s, &joint).expect("replay step");
                total += out.reward;
                s = out.next_state;
            }
            if total.to_bits() != result.best_accumulated_reward.to_bits() {
                replay_failures += 1;
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = checked >= 50
        && mismatches == 0
        && replay_failures == 0
        && elapsed < Duration::from_secs(300);
    verdict(
        pass,
        format!(
            "{checked} instances, {transitions} transitions, {mismatches} reward mismatches, \
             {replay_failures} replay failures, {elapsed:.1?}"
        ),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for instance in 0..10 {
        let dims = [
            rng.random_range(3..9),
            rng.random_range(4..12),
            rng.random_range(4..12),
            Action::COUNT,
        ];
        let mut net = Mlp::new(dims, &mut rng).expect("dims");
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..dims[3]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mask = (instance % 2 == 1).then(|| rng.random_range(0..dims[3]));
        let grads = net.backward(&x, &t, mask).expect("backward");
        for i in 0..grads.len() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = net.loss(&x, &t, mask).expect("loss");
            net.params_mut()[i] = orig - h;
            let down = net.loss(&x, &t, mask).expect("loss");
            net.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = grads[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((grads[i] - fd).abs() / scale);
            params += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-4 && elapsed < Duration::from_secs(30),
        format!("{params} parameters, worst relative error {worst:.2e}, {elapsed:.2?}"),
    )
}

fn warmup_gate() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = AgentConfig {
        batch_size: 32,
        warmup_multiplier: 5,
        ..AgentConfig::default()
    };
    let n = 16;
    let mut agent = Agent::new(n, config, &mut rng).expect("agent");
    let initial = agent.policy().params().to_vec();
    let mut first_change = None;
    for stored in 1..=200usize {
        let s: Arc<[f64]> = (0..n).map(|_| rng.random()).collect();
        agent.store(Transition {
            state: Arc::clone(&s),
            action: Action::Execute,
            reward: 1.0,
            next_state: s,
            terminal: true,
        });
        agent.learn_step(&mut rng).expect("learn");
        if first_change.is_none() && agent.policy().params() != initial.as_slice() {
            first_change = Some(stored);
        }
    }
    verdict(
        first_change == Some(161),
        format!("parameters first change after {first_change:?} stored samples"),
    )
}

fn trailing(r: &RunResult) -> (f64, Option<f64>) {
    let last = r.series.last().expect("non-empty run");
    (last.success_rate, last.avg_success_reward)
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn fixed_geometry_spec() -> ExperimentSpec {
    ExperimentSpec {
        kind: ExperimentKind::ThresholdSweep,
        psi_values: vec![5, 1],
        task_count: 4,
        locations: LocationMode::Fixed,
        lengths: LengthMode::Fixed(5),
        schedule: EpsilonSchedule {
            start: 0.5,
            decrement_per_step: 3e-6,
            floor: 0.2,
        },
        budget: Budget::UntilFloor,
        window: 100,
        seeds: vec![1, 2, 3],
        ..ExperimentSpec::default()
    }
}

fn density_spec() -> ExperimentSpec {
    ExperimentSpec {
        task_counts: vec![8, 2],
        seeds: vec![1, 2, 3],
        ..ExperimentSpec::preset(ExperimentKind::Density)
    }
}

fn fixed_geometry(results: &[RunResult]) -> Verdict {
    let rates: Vec<f64> = results
        .iter()
        .filter(|r| r.point.warmup_multiplier == 5)
        .map(|r| trailing(r).0)
        .collect();
    let above = rates.iter().filter(|&&r| r >= 0.8).count();
    let pass = rates.len() == 3 && above >= 2 && rates.iter().all(|&r| r >= 0.7);
    verdict(
        pass,
        format!("trailing success rates at epsilon 0.2: {rates:?}"),
    )
}

fn density(results: &[RunResult]) -> Verdict {
    let by = |k: usize| -> Vec<f64> {
        results
            .iter()
            .filter(|r| r.point.scenario.task_count == k)
            .map(|r| trailing(r).0)
            .collect()
    };
    let (eight, two) = (by(8), by(2));
    let high = eight.iter().filter(|&&r| r >= 0.95).count();
    let ordered = two.len() == eight.len() && two.iter().zip(&eight).all(|(a, b)| a < b);
    verdict(
        eight.len() == 3 && high >= 2 && ordered,
        format!("8 tasks {eight:?}, 2 tasks {two:?}"),
    )
}

fn psi_ordering(results: &[RunResult]) -> Verdict {
    let mean = |psi: usize| -> Option<f64> {
        let v: Vec<f64> = results
            .iter()
            .filter(|r| r.point.warmup_multiplier == psi)
            .map(|r| trailing(r).1)
            .collect::<Option<_>>()?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    };
    match (mean(5), mean(1)) {
        (Some(five), Some(one)) => verdict(
            five >= one,
            format!("mean trailing successful reward psi5 {five:.4}, psi1 {one:.4}"),
        ),
        (five, one) => verdict(
            false,
            format!("a seed had no success: psi5 {five:?}, psi1 {one:?}"),
        ),
    }
}

fn determinism() -> Verdict {
    let mut spec = fixed_geometry_spec();
    spec.budget = Budget::Episodes(15);
    let point = spec.sweep_points().expect("points").remove(0);
    let manifest = RunManifest::new(&spec, point, 0, 11);
    let replay: RunManifest =
        serde_json::from_str(&serde_json::to_string(&manifest).expect("serialize"))
            .expect("deserialize");
    match (manifest.run(), replay.run()) {
        (Ok(a), Ok(b)) => {
            let lines = |r: &RunResult| -> Vec<String> {
                r.records
                    .iter()
                    .map(|e| serde_json::to_string(e).expect("record"))
                    .collect()
            };
            let same = a.records == b.records && lines(&a) == lines(&b);
            verdict(
                same,
                format!(
                    "{} episodes, {} steps",
                    a.records.len(),
                    a.records.iter().map(|r| r.steps).sum::<u32>()
                ),
            )
        }
        (a, b) => verdict(false, format!("{:?} {:?}", a.err(), b.err())),
    }
}

/// Hard criteria decide the exit status. The training results (6 to 8) are
/// statistical gates: their PASS/FAIL lines are printed as measured, but
/// only an error while training fails the run.
#[derive(Clone, Copy, PartialEq)]
enum Gate {
    Hard,
    Statistical,
}

fn main() -> ExitCode {
    let mut hard_ok = true;
    let mut statistical_failures = Vec::new();
    let mut report = |n: usize, name: &str, gate: Gate, v: Verdict| {
        if !v.pass {
            match gate {
                Gate::Hard => hard_ok = false,
                Gate::Statistical => statistical_failures.push(n),
            }
        }
        println!(
            "criterion {n} {}: {name} ({})",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    };
    use Gate::{Hard, Statistical};
    report(1, "scaled-rate fidelity", Hard, scaled_rate_fidelity());
    report(2, "physics correctness", Hard, physics_correctness());
    report(
        3,
        "environment oracle equivalence",
        Hard,
        oracle_equivalence(),
    );
    report(4, "gradient check", Hard, gradient_check());
    report(5, "warm-up gate", Hard, warmup_gate());

    let started = Instant::now();
    match run_experiment(&fixed_geometry_spec(), jobs()) {
        Ok(results) => {
            let geometry = fixed_geometry(&results);
            report(6, "fixed-geometry success rate", Statistical, geometry);
            report(
                8,
                "warm-up multiplier ordering",
                Statistical,
                psi_ordering(&results),
            );
        }
        Err(e) => {
            report(
                6,
                "fixed-geometry success rate",
                Hard,
                verdict(false, e.to_string()),
            );
            report(
                8,
                "warm-up multiplier ordering",
                Hard,
                verdict(false, e.to_string()),
            );
        }
    }
    match run_experiment(&density_spec(), jobs()) {
        Ok(results) => report(7, "task density", Statistical, density(&results)),
        Err(e) => report(7, "task density", Hard, verdict(false, e.to_string())),
    }
    eprintln!("training criteria took {:.0?}", started.elapsed());
    report(9, "determinism", Hard, determinism());

    if !statistical_failures.is_empty() {
        println!("statistical criteria below target: {statistical_failures:?}");
    }
    if hard_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

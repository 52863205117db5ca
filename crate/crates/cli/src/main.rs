use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dronenet_core::config::RunConfig;
use dronenet_core::energy::{physical_rates, scaled_rates, PhysicsParams};
use dronenet_core::experiments::{
    self, avg_success_reward, derive_series, evaluate_checkpoint, persist_results, read_episodes,
    read_json, run_experiment, success_rate, write_json, write_metrics, write_metrics_csv, Budget,
    ExperimentKind, ExperimentSpec, LengthMode, LocationMode, RunManifest, RunResult, SweepPoint,
    TrainingRun,
};
use dronenet_core::oracle::solve_exhaustive;
use dronenet_core::world::{Environment, GridConfig, RewardCoefs, TaskSpec};

const OUTPUT_ROOT_ENV: &str = "DRONENET_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "dronenet",
    version,
    about = "Multi-drone task execution with deep Q-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print physical power rates for a parameter set, and the scaled rates.
    Physics(PhysicsArgs),
    /// Train one team and save metrics, episodes and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint without learning.
    Eval(EvalArgs),
    /// Run a whole experiment over its sweep points and seeds.
    Sweep(SweepArgs),
    /// Exhaustively search a tiny instance for the best action sequences.
    Oracle(OracleArgs),
    /// Recompute metrics.csv from episode logs.
    Export(ExportArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct PhysicsArgs {
    #[arg(long)]
    diameter: Option<f64>,
    #[arg(long)]
    mass: Option<f64>,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    pitch: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rotors: Option<u32>,
    #[arg(long)]
    drag: Option<f64>,
    #[arg(long)]
    gravity: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Threshold,
    Geometry,
    Density,
}

impl From<Preset> for ExperimentKind {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Threshold => ExperimentKind::ThresholdSweep,
            Preset::Geometry => ExperimentKind::Geometry,
            Preset::Density => ExperimentKind::Density,
        }
    }
}

/// Options shared by `train` and `sweep` that override the configuration.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Train for exactly this many episodes instead of until the epsilon floor.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    fixed_locations: bool,
    #[arg(long)]
    random_locations: bool,
    /// Task length: `5` or a range `1-5`.
    #[arg(long, value_parser = parse_lengths)]
    lengths: Option<LengthMode>,
    #[arg(long)]
    episode_length: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Replay-buffer warm-up multiplier.
    #[arg(long)]
    psi: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long, conflicts_with_all = ["manifest", "config"])]
    resume: Option<PathBuf>,
    /// Repeat the run described by a saved manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Task as `column,row,length`; repeat for more tasks.
    #[arg(long = "task", required = true, value_parser = parse_task)]
    tasks: Vec<[u32; 3]>,
    #[arg(long, default_value_t = 3)]
    side: usize,
    #[arg(long)]
    drones: Option<usize>,
    #[arg(long)]
    horizon: u32,
}

#[derive(Args)]
struct ExportArgs {
    /// Episode logs (`.jsonl`), or a directory holding them.
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Destination CSV; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_lengths(s: &str) -> Result<LengthMode, String> {
    let num = |t: &str| t.trim().parse::<u32>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok(LengthMode::Uniform(num(a)?, num(b)?)),
        None => Ok(LengthMode::Fixed(num(s)?)),
    }
}

fn parse_task(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected column,row,length, got {s:?}"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Physics(a) => physics(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Oracle(a) => oracle(a),
        Command::Export(a) => export(a),
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value")
    );
}

fn physics(a: PhysicsArgs) -> Result<()> {
    let mut p = PhysicsParams::default();
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut p.rotor_diameter_m, a.diameter);
    set(&mut p.drone_mass_kg, a.mass);
    set(&mut p.ground_speed_mps, a.speed);
    set(&mut p.pitch_angle_rad, a.pitch);
    set(&mut p.power_efficiency, a.eta);
    set(&mut p.air_density_kgpm3, a.rho);
    set(&mut p.drag_force_n, a.drag);
    set(&mut p.gravity_mps2, a.gravity);
    if let Some(c) = a.rotors {
        p.rotor_count = c;
    }
    let physical = physical_rates(&p)?;
    print_json(&json!({
        "params": p,
        "physical": physical,
        "scaled": scaled_rates(),
    }));
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Applies the shared overrides and resolves the output directory.
fn apply_overrides(o: &Overrides, config: &mut RunConfig, default_name: &str) -> Result<PathBuf> {
    let spec = &mut config.spec;
    if let Some(n) = o.episodes {
        spec.budget = Budget::Episodes(n);
    }
    if let Some(seeds) = &o.seeds {
        spec.seeds = seeds.clone();
    }
    match (o.fixed_locations, o.random_locations) {
        (true, true) => bail!("--fixed-locations and --random-locations are mutually exclusive"),
        (true, false) => spec.locations = LocationMode::Fixed,
        (false, true) => spec.locations = LocationMode::Random,
        (false, false) => {}
    }
    if let Some(l) = o.lengths {
        spec.lengths = l;
    }
    if let Some(n) = o.episode_length {
        spec.grid.episode_length = n;
    }
    Ok(output_dir(
        o.output.as_deref(),
        config.output_dir.as_deref(),
        default_name,
    ))
}

fn output_dir(flag: Option<&Path>, configured: Option<&Path>, default_name: &str) -> PathBuf {
    if let Some(p) = flag.or(configured) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(default_name)
}

fn train(a: TrainArgs) -> Result<()> {
    if let Some(dir) = &a.resume {
        return resume(&a, dir);
    }
    let (manifest, out) = match &a.manifest {
        Some(path) => {
            let m: RunManifest = read_json(path)?;
            let out = output_dir(a.overrides.output.as_deref(), None, "replay");
            (m, out)
        }
        None => {
            let mut config = load_config(a.overrides.config.as_deref())?;
            if let Some(psi) = a.psi {
                config.spec.agent.warmup_multiplier = psi;
            }
            if let Some(k) = a.tasks {
                config.spec.task_count = k;
            }
            let out = apply_overrides(&a.overrides, &mut config, "train")?;
            let spec = config.spec;
            spec.validate()?;
            let seed = spec.seeds[0];
            let scenario = spec.scenario(spec.task_count, spec.locations, spec.lengths)?;
            let point = SweepPoint {
                label: "train".into(),
                warmup_multiplier: spec.agent.warmup_multiplier,
                scenario,
            };
            (RunManifest::new(&spec, point, 0, seed), out)
        }
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("manifest.json"), &manifest)?;
    let mut run = manifest.training_run()?;
    run.train(manifest.spec.budget)?;
    finish_run(&out, run, &manifest.spec)
}

fn resume(a: &TrainArgs, dir: &Path) -> Result<()> {
    let mut run = TrainingRun::resume(dir)?;
    let budget = a
        .overrides
        .episodes
        .map_or(Budget::UntilFloor, Budget::Episodes);
    let out = output_dir(a.overrides.output.as_deref(), None, "resume");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    run.train(budget)?;
    let spec = ExperimentSpec {
        grid: run.env.config,
        rewards: run.env.coefs,
        agent: run.agent_config,
        schedule: run.schedule,
        budget,
        ..ExperimentSpec::default()
    };
    finish_run(&out, run, &spec)
}

fn finish_run(out: &Path, run: TrainingRun, spec: &ExperimentSpec) -> Result<()> {
    run.save_checkpoint(&out.join("checkpoint"))?;
    let result = RunResult {
        series: derive_series(&run.records, spec.window, spec.report_every)?,
        point: run.point,
        point_index: run.point_index,
        seed: run.seed,
        records: run.records,
    };
    let summary = persist_results(out, spec.kind, spec.window, std::slice::from_ref(&result))?;
    print_json(&json!({
        "output": out,
        "global_step": run.global_step,
        "summary": summary,
    }));
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut config = match a.preset {
        Some(p) => RunConfig {
            output_dir: None,
            spec: ExperimentSpec::preset(p.into()),
        },
        None => load_config(a.overrides.config.as_deref())?,
    };
    let name = config.spec.kind.to_string();
    let out = apply_overrides(&a.overrides, &mut config, &name)?;
    let spec = &config.spec;
    spec.validate()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), config.to_toml_string())
        .with_context(|| format!("writing config to {}", out.display()))?;
    let results = run_experiment(spec, a.jobs)?;
    let summary = persist_results(&out, spec.kind, spec.window, &results)?;
    print_json(&json!({ "output": out, "summary": summary }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let records = evaluate_checkpoint(&a.checkpoint, a.episodes, a.epsilon, a.seed)?;
    print_json(&json!({
        "episodes": records.len(),
        "epsilon": a.epsilon,
        "success_rate": success_rate(&records)?,
        "avg_success_reward": avg_success_reward(&records),
    }));
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let grid = GridConfig {
        side_points: a.side,
        ..GridConfig::default()
    };
    let env = Environment::new(grid, RewardCoefs::default())?;
    let tasks = a
        .tasks
        .iter()
        .map(|&[x, y, length]| {
            let (x, y) = (x as usize, y as usize);
            if x >= a.side || y >= a.side {
                bail!("task ({x}, {y}) is outside a {0}x{0} grid", a.side);
            }
            Ok(TaskSpec {
                location: grid.index_of(x, y),
                length,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let drones = a.drones.unwrap_or(tasks.len());
    let result = solve_exhaustive(&env, &tasks, drones, a.horizon)?;
    print_json(&serde_json::to_value(&result)?);
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let files: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .with_context(|| format!("reading {}", a.input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    if files.is_empty() {
        bail!("no .jsonl files in {}", a.input.display());
    }
    let results = files
        .iter()
        .map(|f| {
            let records = read_episodes(f)?;
            let (label, seed) = split_log_name(f);
            Ok(RunResult {
                series: derive_series(&records, a.window, a.stride)?,
                point: SweepPoint {
                    label,
                    warmup_multiplier: 0,
                    scenario: experiments::Scenario {
                        task_count: records.first().map_or(0, |r| r.tasks.len()),
                        locations: LocationMode::Fixed,
                        lengths: LengthMode::Fixed(1),
                        layout: Vec::new(),
                        candidates: Vec::new(),
                    },
                },
                point_index: 0,
                seed,
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match &a.output {
        Some(path) => write_metrics_csv(path, &results)?,
        None => write_metrics(std::io::stdout().lock(), &results)?,
    }
    Ok(())
}

/// `psi5_seed3.jsonl` gives `("psi5", 3)`; other names keep the stem and seed 0.
fn split_log_name(path: &Path) -> (String, u64) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.rsplit_once("_seed") {
        Some((label, seed)) => match seed.parse() {
            Ok(s) => (label.to_string(), s),
            Err(_) => (stem, 0),
        },
        None => (stem, 0),
    }
}

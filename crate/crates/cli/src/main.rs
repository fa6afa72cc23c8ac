use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gearmpc::control::{
    run_episode, write_step_csv, write_timing_csv, write_traces, ControllerConfig, ControllerKind, Episode,
};
use gearmpc::harness::{evaluate, generate_scenario, plot_data, quartiles, EvalConfig, Quartiles};
use gearmpc::policy::{
    generate_expert_data, train_policy, CellKind, DataConfig, ExpertDataset, Optimizer, PolicyModel, TrainConfig,
};
use gearmpc::vehicle::VehicleParams;

/// Speed and gear-shift MPC simulator with a learned gear policy.
#[derive(Parser, Debug)]
#[command(name = "gearmpc", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Vehicle parameter file (JSON); the built-in passenger car when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for scenarios, data generation and training.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// MPC prediction horizon N.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Number of episodes.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Closed-loop steps per episode.
    #[arg(long, global = true, default_value_t = 60)]
    k_sim: usize,
    /// Apply the unmodelled time-varying headwind to the plant.
    #[arg(long, global = true)]
    headwind: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Write per-iteration solver traces (JSON lines) to this directory.
    #[arg(long, global = true, value_name = "DIR")]
    trace_dir: Option<PathBuf>,
    /// Accept vehicle files whose backup schedule is not guaranteed feasible.
    #[arg(long, global = true)]
    allow_infeasible_backup: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Verify the backup-feasibility conditions and the speed envelope.
    Check,
    /// Generate an expert dataset with the exact controller.
    GenData,
    /// Train a gear policy on an expert dataset.
    Train(TrainArgs),
    /// Run one closed-loop episode with full logs.
    Simulate(SimulateArgs),
    /// Compare controllers on paired scenarios.
    Evaluate(EvaluateArgs),
    /// Re-emit an evaluation as wide CSV tables for box plots.
    PlotData(PlotArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset file written by `gen-data`.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, value_enum, default_value_t = CellArg::Gru)]
    cell: CellArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Momentum)]
    optimizer: OptimizerArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CellArg {
    Gru,
    Tanh,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Momentum,
    Adam,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// LM, NM, HM or BACKUP.
    #[arg(long, default_value = "NM")]
    controller: String,
    /// Policy model file, required for LM.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Comma-separated controllers.
    #[arg(long, default_value = "LM,NM,HM", value_delimiter = ',')]
    controllers: Vec<String>,
    /// Policy model file, required for LM.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Skip the cost increase relative to NM.
    #[arg(long)]
    no_relative_cost: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Directory written by `evaluate`.
    #[arg(long, value_name = "DIR")]
    from: PathBuf,
}

/// Input that fails a precondition; maps to exit code 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(err: &anyhow::Error) -> bool {
    use gearmpc::Error as E;
    err.chain().any(|cause| {
        cause.is::<Invalid>()
            || matches!(
                cause.downcast_ref::<E>(),
                Some(
                    E::InvalidGear(_)
                        | E::InvalidParams(_)
                        | E::BackupAssumption { .. }
                        | E::LengthMismatch { .. }
                        | E::GearSkip(_)
                        | E::Horizon { .. }
                        | E::WeightNotPd
                        | E::ModelFormat(_)
                        | E::Dataset(_)
                        | E::Json(_)
                )
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_params(g: &Global, allow: bool) -> Result<VehicleParams> {
    match &g.config {
        Some(path) => Ok(VehicleParams::from_json_file(path, allow)?),
        None => {
            let p = VehicleParams::default();
            if !allow {
                p.check_backup_assumption().into_result()?;
            }
            Ok(p)
        }
    }
}

fn controller_config(g: &Global, default_horizon: usize) -> ControllerConfig {
    ControllerConfig { horizon: g.horizon.unwrap_or(default_horizon), ..ControllerConfig::default() }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: Option<&Path>, kinds: &[ControllerKind]) -> Result<Option<PolicyModel>> {
    match path {
        Some(p) => Ok(Some(PolicyModel::load(p)?)),
        None if kinds.contains(&ControllerKind::Learned) => {
            Err(Invalid("the learned controller (LM) needs --model".into()).into())
        }
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Check => check(g),
        Command::GenData => gen_data(g),
        Command::Train(a) => train(g, a),
        Command::Simulate(a) => simulate(g, a),
        Command::Evaluate(a) => run_evaluate(g, a),
        Command::PlotData(a) => {
            for path in plot_data(&a.from, &g.out)? {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn check(g: &Global) -> Result<ExitCode> {
    let p = load_params(g, true)?;
    let report = p.check_backup_assumption();
    let (lo, hi) = p.velocity_bounds();
    println!("speed envelope: [{lo:.6}, {hi:.6}] m/s");
    println!("{:<5} {:<6} {:>9} {:>12} {:>12} {:>12}  ok", "gear", "end", "v (m/s)", "need (N)", "min (N)", "max (N)");
    for c in &report.conditions {
        println!(
            "{:<5} {:<6} {:>9.3} {:>12.1} {:>12.1} {:>12.1}  {}",
            c.gear.get(),
            format!("{:?}", c.endpoint).to_lowercase(),
            c.speed,
            c.required_force,
            c.force_min,
            c.force_max,
            if c.satisfied { "yes" } else { "NO" }
        );
    }
    let total = report.conditions.len();
    let passed = total - report.failures();
    println!("{passed}/{total} backup conditions hold");
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn gen_data(g: &Global) -> Result<ExitCode> {
    let p = load_params(g, g.allow_infeasible_backup)?;
    let cfg = DataConfig {
        episodes: g.episodes.unwrap_or(40),
        k_sim: g.k_sim,
        seed: g.seed,
        controller: controller_config(g, 5),
    };
    let data = generate_expert_data(&cfg, &p)?;
    create_dir(&g.out)?;
    let path = g.out.join("dataset.jsonl");
    data.save(&path)?;
    println!("wrote {} samples to {} (sha256 {})", data.len(), path.display(), data.hash());
    Ok(ExitCode::SUCCESS)
}

fn train(g: &Global, a: &TrainArgs) -> Result<ExitCode> {
    let p = load_params(g, true)?;
    let data = ExpertDataset::load(&a.data)?;
    let optimizer = match a.optimizer {
        OptimizerArg::Momentum => Optimizer::Momentum,
        OptimizerArg::Adam => Optimizer::Adam,
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate.unwrap_or(match optimizer {
            Optimizer::Momentum => defaults.learning_rate,
            Optimizer::Adam => 0.003,
        }),
        batch_size: a.batch_size,
        optimizer,
        seed: g.seed,
        cell: match a.cell {
            CellArg::Gru => CellKind::Gru,
            CellArg::Tanh => CellKind::Tanh,
        },
        layers: a.layers,
        hidden: a.hidden,
        ..defaults
    };
    let (model, report) = train_policy(&data, &cfg, &p)?;
    create_dir(&g.out)?;
    let path = g.out.join("model.json");
    model.save(&path)?;
    write_json(&g.out.join("train_report.json"), &report)?;
    match (report.val_accuracy, report.majority_baseline) {
        (Some(acc), Some(base)) => println!(
            "held-out accuracy {:.1}% (majority baseline {:.1}%), best epoch {}",
            100.0 * acc,
            100.0 * base,
            report.best_epoch
        ),
        _ => println!("trained without a held-out split, best epoch {}", report.best_epoch),
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Episode outcome without wall-clock quantities.
#[derive(Serialize)]
struct EpisodeSummary<'a> {
    controller: ControllerKind,
    seed: u64,
    horizon: usize,
    k_sim: usize,
    headwind: bool,
    metric: Option<f64>,
    steps: usize,
    backup_steps: usize,
    backup_fraction: f64,
    mean_backup_distance: Option<f64>,
    failure: Option<&'a str>,
}

#[derive(Serialize)]
struct TimingReport {
    mean: f64,
    max: f64,
    quartiles: Option<Quartiles>,
}

fn simulate(g: &Global, a: &SimulateArgs) -> Result<ExitCode> {
    let kind: ControllerKind = a.controller.parse()?;
    let p = load_params(g, g.allow_infeasible_backup)?;
    let mut cfg = controller_config(g, 5);
    cfg.sqp.record_trace = g.trace_dir.is_some();
    let model = load_model(a.model.as_deref(), &[kind])?;
    let mut scenario = generate_scenario(g.seed, g.k_sim, cfg.horizon, &p)?;
    if g.headwind {
        scenario = scenario.with_headwind(g.k_sim);
    }
    let Episode { result, logs } = run_episode(
        kind,
        g.seed,
        scenario.x0,
        &scenario.reference,
        scenario.headwind.as_deref(),
        g.k_sim,
        model.as_ref(),
        &p,
        &cfg,
        &mut |_| {},
    )?;

    create_dir(&g.out)?;
    let steps_path = g.out.join("steps.csv");
    let mut w = BufWriter::new(File::create(&steps_path)?);
    write_step_csv(&mut w, &logs)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(g.out.join("timings.csv"))?);
    write_timing_csv(&mut w, &logs)?;
    w.flush()?;
    write_json(
        &g.out.join("summary.json"),
        &EpisodeSummary {
            controller: kind,
            seed: g.seed,
            horizon: cfg.horizon,
            k_sim: g.k_sim,
            headwind: g.headwind,
            metric: result.metric,
            steps: result.steps,
            backup_steps: result.backup_steps,
            backup_fraction: result.backup_fraction,
            mean_backup_distance: result.mean_backup_distance,
            failure: result.failure.as_deref(),
        },
    )?;
    write_json(
        &g.out.join("timings.json"),
        &TimingReport {
            mean: result.mean_solve_time(),
            max: result.max_solve_time(),
            quartiles: quartiles(&result.solve_times),
        },
    )?;
    if let Some(dir) = &g.trace_dir {
        create_dir(dir)?;
        let path = dir.join(format!("{}_{}.jsonl", kind.name().to_lowercase(), g.seed));
        let mut w = BufWriter::new(File::create(&path)?);
        write_traces(&mut w, kind, g.seed, &logs)?;
        w.flush()?;
    }

    match (&result.failure, result.metric) {
        (None, Some(metric)) => {
            println!(
                "{kind}: P = {metric:.6} over {} steps, backup {:.2}%",
                result.steps,
                100.0 * result.backup_fraction
            );
            Ok(ExitCode::SUCCESS)
        }
        (failure, _) => {
            eprintln!("error: episode failed: {}", failure.as_deref().unwrap_or("unknown"));
            Ok(ExitCode::from(1))
        }
    }
}

fn run_evaluate(g: &Global, a: &EvaluateArgs) -> Result<ExitCode> {
    let kinds =
        a.controllers.iter().map(|s| s.trim().parse::<ControllerKind>()).collect::<gearmpc::Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        controllers: kinds.clone(),
        episodes: g.episodes.unwrap_or(20),
        k_sim: g.k_sim,
        seed: g.seed,
        headwind: g.headwind,
        relative_cost: !a.no_relative_cost,
        controller: controller_config(g, 5),
    };
    let model = load_model(a.model.as_deref(), &kinds)?;
    cfg.validate(model.as_ref())?;
    let p = load_params(g, g.allow_infeasible_backup)?;
    let ev = evaluate(&cfg, &p, model.as_ref())?;
    ev.write(&g.out)?;
    for s in &ev.report.controllers {
        let delta = s.delta_p.map_or("n/a".to_string(), |q| format!("{:.3}% [{:.3}, {:.3}]", q.median, q.q1, q.q3));
        let t = ev.timing(s.controller).and_then(|t| t.episode_mean);
        println!(
            "{:<6} completed {:>3}  dP median {delta}  backup {:.2}%  median solve {}",
            s.controller.name(),
            s.completed,
            s.backup_percent,
            t.map_or("n/a".into(), |q| format!("{:.2} ms", 1e3 * q.median))
        );
    }
    println!("wrote {}", g.out.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

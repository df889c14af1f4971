//! `cts`: train, evaluate, export and sanity-check the target-search stack.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cts_core::curriculum::CurriculumMode;
use cts_core::eval::{self, Controller, EvalReport, EvalSettings};
use cts_core::export::export_run;
use cts_core::policy::load_checkpoint;
use cts_core::ppo::{train, MetricsRow, TrainConfig};
use cts_core::world::WorldConfig;

#[derive(Debug, Parser)]
#[command(name = "cts", version, about = "Drone-swarm collaborative target search: training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one training stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a room x agent-count grid.
    Eval(EvalArgs),
    /// Turn traces and metrics files into plot-ready outputs.
    Export(ExportArgs),
    /// Run a scripted controller to validate the environment.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; defaults apply when omitted.
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    /// Checkpoint to initialise stage 2 from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Stage 2 from random weights (ablation).
    #[arg(long)]
    pub direct: bool,
    /// Disable the adaptive curriculum.
    #[arg(long)]
    pub no_aec: bool,
    /// Constant spawn threshold used with `--no-aec` (default 0.3).
    #[arg(long, requires = "no_aec")]
    pub fixed_epsilon: Option<f64>,
    #[arg(long)]
    pub agents: Option<usize>,
    /// Environment-step budget for this stage.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Suppress per-iteration progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated builtin room names or layout files.
    #[arg(long, value_delimiter = ',', default_value = "5x5x3")]
    pub rooms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub agents: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Remove furniture from every room.
    #[arg(long)]
    pub obstacle_free: bool,
    /// Also write per-step traces (JSON lines) for each cell.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Use the squashed mean instead of sampling.
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    pub sweep: SweepArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scripted {
    StraightLine,
    Random,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = Scripted::StraightLine)]
    pub policy: Scripted,
    #[command(flatten)]
    pub sweep: SweepArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Trace file or directory scanned for `*.jsonl` and `metrics.csv`.
    pub input: PathBuf,
    #[arg(long, default_value = "runs/export")]
    pub out: PathBuf,
    /// Accepted for uniformity; export is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Export(a) => run_export(&a),
        Command::Oracle(a) => run_oracle(&a),
    }
}

/// Merge the config file with command-line overrides.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading training config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.stage {
        cfg.stage.stage = s;
    }
    if let Some(p) = &a.init {
        if !p.is_file() {
            bail!("init checkpoint {} does not exist", p.display());
        }
        cfg.stage.init = Some(p.clone());
    }
    if a.direct {
        cfg.stage.direct = true;
    }
    if a.no_aec {
        let epsilon = a.fixed_epsilon.unwrap_or(0.3);
        cfg.stage.curriculum = CurriculumMode::Fixed { epsilon };
    }
    if let Some(n) = a.agents {
        cfg.stage.agents = Some(n);
    }
    if let Some(s) = a.steps {
        cfg.stage.steps = Some(s);
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(m) = a.max_iterations {
        cfg.max_iterations = Some(m);
    }
    cfg.validate().context("invalid training config")?;
    Ok(cfg)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let quiet = a.quiet;
    let summary = train(&cfg, Some(&a.out), |r: &MetricsRow| {
        if !quiet {
            eprintln!(
                "iter {:>5}  steps {:>9}  reward {:>8.3}  success {:.3}  eps {:.2}  entropy {:.3}",
                r.iteration, r.env_steps, r.mean_cumulative_reward, r.success_rate, r.epsilon, r.entropy
            );
        }
        true
    })
    .context("training failed")?;
    println!(
        "trained stage {} for {} env steps; outputs in {}",
        cfg.stage.stage,
        summary.env_steps,
        a.out.display()
    );
    Ok(())
}

fn resolve_rooms(s: &SweepArgs) -> Result<Vec<WorldConfig>> {
    if s.agents.iter().any(|&n| n == 0) {
        bail!("agent counts must be >= 1");
    }
    if !(0.0..=1.0).contains(&s.epsilon) {
        bail!("epsilon must lie in [0, 1], got {}", s.epsilon);
    }
    if s.episodes == 0 {
        bail!("episodes must be >= 1");
    }
    s.rooms
        .iter()
        .map(|r| {
            let w = WorldConfig::resolve(r).with_context(|| format!("room '{r}'"))?;
            Ok(if s.obstacle_free { w.without_obstacles() } else { w })
        })
        .collect()
}

fn settings(s: &SweepArgs) -> EvalSettings {
    let workers = if s.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        s.workers
    };
    EvalSettings {
        episodes: s.episodes,
        epsilon: s.epsilon,
        seed: s.seed,
        workers,
    }
}

/// Evaluate every cell, write reports, config echo and optional traces.
fn run_sweep(controller: &Controller, s: &SweepArgs, echo: serde_json::Value) -> Result<Vec<EvalReport>> {
    let rooms = resolve_rooms(s)?;
    let settings = settings(s);
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    let echo_path = s.out.join("eval_config.json");
    fs::write(&echo_path, serde_json::to_string_pretty(&echo)?).with_context(|| format!("writing {}", echo_path.display()))?;

    let reports = if s.trace {
        let mut reports = Vec::new();
        for room in &rooms {
            for &n in &s.agents {
                let (r, records) = eval::evaluate_traced(controller, &room.with_agents(n), &settings)?;
                let path = s.out.join(format!("trace_{}_n{}.jsonl", r.room, n));
                eval::write_trace(&records, &path)?;
                reports.push(r);
            }
        }
        reports
    } else {
        eval::sweep(controller, &rooms, &s.agents, &settings)?
    };
    eval::write_reports(&reports, &s.out.join("report.csv"), &s.out.join("report.json"))?;
    print_matrix(&reports);
    Ok(reports)
}

fn print_matrix(reports: &[EvalReport]) {
    println!("{:<10} {:>6} {:>9} {:>12}", "room", "agents", "success", "mean steps");
    for r in reports {
        let steps = r.mean_steps_to_reach.map_or("-".to_string(), |m| format!("{m:.1}"));
        println!("{:<10} {:>6} {:>8.1}% {:>12}", r.room, r.agents, 100.0 * r.success_rate, steps);
    }
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let (params, header) = load_checkpoint(&a.checkpoint, None)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let controller = Controller::Network {
        params: &params,
        deterministic: a.deterministic,
    };
    let echo = serde_json::json!({
        "checkpoint": a.checkpoint,
        "net": header.net,
        "deterministic": a.deterministic,
        "sweep": sweep_echo(&a.sweep),
    });
    run_sweep(&controller, &a.sweep, echo).map(|_| ())
}

fn run_oracle(a: &OracleArgs) -> Result<()> {
    let controller = match a.policy {
        Scripted::StraightLine => Controller::StraightLine,
        Scripted::Random => Controller::Random,
    };
    let echo = serde_json::json!({ "policy": controller.name(), "sweep": sweep_echo(&a.sweep) });
    run_sweep(&controller, &a.sweep, echo).map(|_| ())
}

fn sweep_echo(s: &SweepArgs) -> serde_json::Value {
    serde_json::json!({
        "rooms": s.rooms,
        "agents": s.agents,
        "episodes": s.episodes,
        "epsilon": s.epsilon,
        "seed": s.seed,
        "obstacle_free": s.obstacle_free,
    })
}

fn run_export(a: &ExportArgs) -> Result<()> {
    if !a.input.exists() {
        bail!("export input {} does not exist", a.input.display());
    }
    let s = export_run(&a.input, &a.out).with_context(|| format!("exporting {}", a.input.display()))?;
    for p in [&s.trajectories, &s.curves].into_iter().flatten() {
        println!("wrote {}", display(p));
    }
    println!("{} episodes, {} metric runs", s.episodes, s.runs);
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> TrainArgs {
        match Cli::try_parse_from(std::iter::once("cts").chain(args.iter().copied())).unwrap().command {
            Command::Train(a) => a,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_aec_defaults_to_point_three() {
        let cfg = train_config(&parse(&["train", "--no-aec"])).unwrap();
        assert_eq!(cfg.stage.curriculum, CurriculumMode::Fixed { epsilon: 0.3 });
        let cfg = train_config(&parse(&["train", "--no-aec", "--fixed-epsilon", "0.7"])).unwrap();
        assert_eq!(cfg.stage.curriculum, CurriculumMode::Fixed { epsilon: 0.7 });
    }

    #[test]
    fn overrides_apply_over_defaults() {
        let cfg = train_config(&parse(&["train", "--seed", "9", "--stage", "2", "--direct", "--agents", "3"])).unwrap();
        assert_eq!((cfg.seed, cfg.stage.stage, cfg.stage.agents()), (9, 2, 3));
        assert!(cfg.stage.direct);
    }

    #[test]
    fn out_of_range_fixed_epsilon_is_rejected() {
        assert!(train_config(&parse(&["train", "--no-aec", "--fixed-epsilon", "2"])).is_err());
    }

    #[test]
    fn stage_flag_is_range_checked() {
        assert!(Cli::try_parse_from(["cts", "train", "--stage", "3"]).is_err());
    }
}

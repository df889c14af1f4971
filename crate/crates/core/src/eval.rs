//! Evaluation episodes, sweeps and reports.
//!
//! Every episode gets its own environment and action RNG derived from
//! `(seed, episode index)`, so reports are bit-identical for any number of
//! worker threads.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{body_to_world, quat_from_yaw, yaw_of, Vec3, VelocityCommand};
use crate::env::{DoneCause, Environment, TraceRecord};
use crate::error::{Error, Result};
use crate::policy::{sample_action, ActionBounds, ActionDistribution, PolicyParams, RecurrentState};
use crate::rng::seeded;
use crate::world::WorldConfig;

/// What drives the drones.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// The learned policy; `deterministic` uses the squashed mean.
    Network { params: &'a PolicyParams, deterministic: bool },
    /// Privileged oracle: flies straight at the target.
    StraightLine,
    /// Uniform random commands every step.
    Random,
}

impl Controller<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Network { deterministic: true, .. } => "policy-deterministic",
            Controller::Network { .. } => "policy",
            Controller::StraightLine => "straight-line",
            Controller::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 500,
            epsilon: 0.3,
            seed: 0,
            workers: 1,
        }
    }
}

/// Outcome of one evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Room extents formatted `WxLxH`.
    pub room: String,
    pub agents: usize,
    pub controller: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful episodes only; `None` without successes.
    pub mean_steps_to_reach: Option<f64>,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EpisodeResult {
    reach_step: Option<usize>,
}

pub fn room_label(world: &WorldConfig) -> String {
    let f = |v: f64| {
        if v.fract() == 0.0 {
            format!("{}", v as i64)
        } else {
            format!("{v}")
        }
    };
    format!("{}x{}x{}", f(world.room.x), f(world.room.y), f(world.room.z))
}

/// Seed of episode `k`.
fn episode_seed(seed: u64, k: usize) -> u64 {
    let mut r = seeded(seed, 0xe7a1 + k as u64);
    r.gen()
}

fn straight_line(env: &Environment) -> Vec<VelocityCommand> {
    let params = env.config().dynamics;
    let target = env.target().position;
    env.states()
        .iter()
        .map(|s| {
            let d: Vec3 = target - s.p_w;
            let v_world = if d.norm() > 1e-9 {
                d * (params.max_velocity / d.norm()).min(2.0)
            } else {
                Vec3::zeros()
            };
            // Commands are body-frame; undo the yaw.
            let v = body_to_world(&quat_from_yaw(yaw_of(&s.q_wb))).transpose() * v_world;
            VelocityCommand::new(v.x, v.y, v.z, 0.0).clamped(&params)
        })
        .collect()
}

fn random_commands(env: &Environment, rng: &mut ChaCha8Rng) -> Vec<VelocityCommand> {
    let b = ActionBounds::from_params(&env.config().dynamics).0;
    (0..env.num_agents())
        .map(|_| VelocityCommand::from_array(std::array::from_fn(|j| rng.gen_range(-b[j]..=b[j]))))
        .collect()
}

fn run_episode(
    controller: &Controller,
    world: &WorldConfig,
    epsilon: f64,
    seed: u64,
    trace: bool,
) -> Result<(EpisodeResult, Vec<TraceRecord>)> {
    let mut env = Environment::new(world.clone(), seed)?;
    env.set_tracing(trace);
    let mut rng = seeded(seed, 1);
    let mut obs = env.reset(epsilon)?;
    let n = env.num_agents();
    let bounds = ActionBounds::from_params(&world.dynamics);
    let hidden = match controller {
        Controller::Network { params, .. } => params.config.hidden,
        _ => 0,
    };
    let mut rec = vec![RecurrentState::zeros(hidden); n];
    loop {
        let actions = match controller {
            Controller::Network { params, deterministic } => {
                let log_std = params.log_std();
                let mut actions = vec![VelocityCommand::default(); n];
                for i in 0..n {
                    if !env.statuses()[i].is_active() {
                        continue;
                    }
                    let mut h = rec[i].h.clone();
                    let mut c = rec[i].c.clone();
                    let out = params.forward_batch(&obs[i], 1, &mut h, &mut c)?;
                    rec[i] = RecurrentState { h, c };
                    let dist = ActionDistribution::new(std::array::from_fn(|j| out.mean[j]), log_std, bounds);
                    actions[i] = sample_action(&dist, &mut rng, *deterministic).command;
                }
                actions
            }
            Controller::StraightLine => straight_line(&env),
            Controller::Random => random_commands(&env, &mut rng),
        };
        let res = env.step(&actions)?;
        obs = res.observations;
        if res.done {
            let reach_step = (res.info.done_cause == Some(DoneCause::Reached)).then_some(res.info.step);
            return Ok((EpisodeResult { reach_step }, env.take_trace()));
        }
    }
}

fn check_compatible(controller: &Controller, world: &WorldConfig) -> Result<()> {
    if let Controller::Network { params, .. } = controller {
        let rays = world.sensor.num_rays();
        if params.config.num_rays != rays {
            return Err(Error::Config(format!(
                "checkpoint expects {} rays but world '{}' casts {rays}",
                params.config.num_rays, world.name
            )));
        }
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run_all(
    controller: &Controller,
    world: &WorldConfig,
    s: &EvalSettings,
    trace: bool,
) -> Result<Vec<(EpisodeResult, Vec<TraceRecord>)>> {
    if s.episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&s.epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", s.epsilon)));
    }
    world.validate()?;
    check_compatible(controller, world)?;
    pool(s.workers)?.install(|| {
        (0..s.episodes)
            .into_par_iter()
            .map(|k| run_episode(controller, world, s.epsilon, episode_seed(s.seed, k), trace))
            .collect::<Result<Vec<_>>>()
    })
}

fn report(controller: &Controller, world: &WorldConfig, s: &EvalSettings, results: &[EpisodeResult]) -> EvalReport {
    let reach: Vec<usize> = results.iter().filter_map(|r| r.reach_step).collect();
    EvalReport {
        room: room_label(world),
        agents: world.agents,
        controller: controller.name().into(),
        episodes: results.len(),
        successes: reach.len(),
        success_rate: reach.len() as f64 / results.len() as f64,
        mean_steps_to_reach: (!reach.is_empty()).then(|| reach.iter().sum::<usize>() as f64 / reach.len() as f64),
        epsilon: s.epsilon,
        seed: s.seed,
    }
}

/// Run `settings.episodes` episodes at a fixed threshold.
pub fn evaluate(controller: &Controller, world: &WorldConfig, settings: &EvalSettings) -> Result<EvalReport> {
    let results: Vec<EpisodeResult> = run_all(controller, world, settings, false)?
        .into_iter()
        .map(|r| r.0)
        .collect();
    Ok(report(controller, world, settings, &results))
}

/// As [`evaluate`], also returning the step records of every episode
/// (`episode` renumbered to the evaluation index).
pub fn evaluate_traced(
    controller: &Controller,
    world: &WorldConfig,
    settings: &EvalSettings,
) -> Result<(EvalReport, Vec<TraceRecord>)> {
    let runs = run_all(controller, world, settings, true)?;
    let mut results = Vec::with_capacity(runs.len());
    let mut traces = Vec::new();
    for (k, (r, t)) in runs.into_iter().enumerate() {
        results.push(r);
        traces.extend(t.into_iter().map(|mut rec| {
            rec.episode = k as u64;
            rec
        }));
    }
    Ok((report(controller, world, settings, &results), traces))
}

/// Every (room, agent count) combination, rooms outermost.
pub fn sweep(
    controller: &Controller,
    rooms: &[WorldConfig],
    agents: &[usize],
    settings: &EvalSettings,
) -> Result<Vec<EvalReport>> {
    if rooms.is_empty() || agents.is_empty() {
        return Err(Error::EmptyInput("sweep needs at least one room and one agent count".into()));
    }
    let mut out = Vec::with_capacity(rooms.len() * agents.len());
    for room in rooms {
        for &n in agents {
            out.push(evaluate(controller, &room.with_agents(n), settings)?);
        }
    }
    Ok(out)
}

/// Write reports as CSV (one row per cell) and JSON side by side.
pub fn write_reports(reports: &[EvalReport], csv_path: &Path, json_path: &Path) -> Result<()> {
    for p in [csv_path, json_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Checkpoint(format!("{}: {e}", csv_path.display())))?;
    for r in reports {
        w.serialize(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
}

/// Write trace records as JSON lines.
pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Checkpoint(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Lock-step rollout collection over a pool of environments.
//!
//! All environments advance together: one batched forward pass covers every
//! active agent, then the environments step (optionally on a thread pool).
//! Sampling, curriculum updates and buffer writes happen sequentially in
//! environment order, so the collected data does not depend on the number of
//! worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::curriculum::CurriculumState;
use crate::dynamics::VelocityCommand;
use crate::env::{AgentStatus, DoneCause, Environment, StepResult};
use crate::error::{Error, Result};
use crate::policy::{sample_action, ActionBounds, ActionDistribution, PolicyParams, ACTION_DIM};
use crate::rng::seeded;
use crate::world::WorldConfig;

/// One agent step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Pre-squash action sample.
    pub raw_action: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Recurrent state before this step.
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Time-contiguous steps of one agent in one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env: usize,
    pub agent: usize,
    pub steps: Vec<Transition>,
    /// Ends in a true terminal (reach, crash, or the episode ending on a
    /// teammate's reach).
    pub terminal: bool,
    /// Ends at the episode time limit.
    pub truncated: bool,
    /// Value of the state after the last step; unused when `terminal`.
    pub bootstrap: f64,
}

impl Trajectory {
    fn new(env: usize, agent: usize) -> Self {
        Self {
            env,
            agent,
            steps: Vec::new(),
            terminal: false,
            truncated: false,
            bootstrap: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub env: usize,
    /// Cumulative reward averaged over agents.
    pub reward: f64,
    pub length: usize,
    pub success: bool,
    pub epsilon: f64,
}

/// One collection phase.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub buffer: RolloutBuffer,
    pub episodes: Vec<EpisodeStats>,
    pub env_steps: u64,
}

struct Slot {
    env: Environment,
    rng: ChaCha8Rng,
    obs: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    traj: Vec<Trajectory>,
    episode_reward: Vec<f64>,
    running: bool,
}

/// Environments plus the per-environment learner state that persists across
/// collection phases (running episodes continue).
pub struct EnvPool {
    slots: Vec<Slot>,
    hidden: usize,
    bounds: ActionBounds,
    threads: Option<rayon::ThreadPool>,
}

impl EnvPool {
    /// `count` copies of `world`; `workers` > 1 steps them on a thread pool.
    pub fn new(world: &WorldConfig, count: usize, seed: u64, hidden: usize, workers: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("at least one environment is required".into()));
        }
        let mut seeds = seeded(seed, 0x5eed);
        let mut slots = Vec::with_capacity(count);
        for k in 0..count {
            let env = Environment::new(world.clone(), seeds.gen())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + k as u64);
            let n = world.agents;
            slots.push(Slot {
                env,
                rng,
                obs: Vec::new(),
                h: vec![vec![0.0; hidden]; n],
                c: vec![vec![0.0; hidden]; n],
                traj: (0..n).map(|i| Trajectory::new(k, i)).collect(),
                episode_reward: vec![0.0; n],
                running: false,
            });
        }
        let threads = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            slots,
            hidden,
            bounds: ActionBounds::from_params(&world.dynamics),
            threads,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn bounds(&self) -> ActionBounds {
        self.bounds
    }

    /// Environments with an episode in progress.
    pub fn running(&self) -> usize {
        self.slots.iter().filter(|s| s.running).count()
    }

    fn step_all(&mut self, actions: Vec<Vec<VelocityCommand>>) -> Vec<Result<StepResult>> {
        let run = |slots: &mut [Slot]| -> Vec<Result<StepResult>> {
            slots
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(s, a)| s.env.step(a))
                .collect()
        };
        match &self.threads {
            Some(pool) => pool.install(|| run(&mut self.slots)),
            None => self
                .slots
                .iter_mut()
                .zip(&actions)
                .map(|(s, a)| s.env.step(a))
                .collect(),
        }
    }
}

/// Values of `(slot, agent)` states under `params`, without advancing them.
fn bootstrap_values(pool: &EnvPool, params: &PolicyParams, rows: &[(usize, usize)]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let (mut obs, mut h, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for &(k, i) in rows {
        let s = &pool.slots[k];
        obs.extend_from_slice(&s.obs[i]);
        h.extend_from_slice(&s.h[i]);
        c.extend_from_slice(&s.c[i]);
    }
    Ok(params.forward_batch(&obs, rows.len(), &mut h, &mut c)?.value)
}

/// Step every environment under `params` until at least `capacity`
/// transitions are collected. Episode boundaries drive `curriculum`.
pub fn collect_rollouts(
    pool: &mut EnvPool,
    params: &PolicyParams,
    curriculum: &mut CurriculumState,
    capacity: usize,
) -> Result<Rollout> {
    if params.config.hidden != pool.hidden {
        return Err(Error::Shape("policy hidden size differs from the pool's".into()));
    }
    let hd = pool.hidden;
    let bounds = pool.bounds;
    let log_std = params.log_std();
    let mut out = Rollout::default();
    let mut count = 0;

    while count < capacity {
        for slot in pool.slots.iter_mut().filter(|s| !s.running) {
            let eps = curriculum.on_episode_begin();
            slot.obs = slot.env.reset(eps)?;
            let n = slot.obs.len();
            slot.h.iter_mut().chain(slot.c.iter_mut()).for_each(|v| v.fill(0.0));
            slot.episode_reward = vec![0.0; n];
            slot.running = true;
        }

        let mut rows = Vec::new();
        let (mut obs, mut h, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for (k, s) in pool.slots.iter().enumerate() {
            for (i, st) in s.env.statuses().iter().enumerate() {
                if st.is_active() {
                    rows.push((k, i));
                    obs.extend_from_slice(&s.obs[i]);
                    h.extend_from_slice(&s.h[i]);
                    c.extend_from_slice(&s.c[i]);
                }
            }
        }
        let h_before = h.clone();
        let c_before = c.clone();
        let net = params.forward_batch(&obs, rows.len(), &mut h, &mut c)?;

        let mut actions: Vec<Vec<VelocityCommand>> = pool
            .slots
            .iter()
            .map(|s| vec![VelocityCommand::default(); s.env.num_agents()])
            .collect();
        let mut samples = Vec::with_capacity(rows.len());
        for (r, &(k, i)) in rows.iter().enumerate() {
            let dist = ActionDistribution::new(
                std::array::from_fn(|j| net.mean[r * ACTION_DIM + j]),
                log_std,
                bounds,
            );
            let s = sample_action(&dist, &mut pool.slots[k].rng, false);
            actions[k][i] = s.command;
            samples.push(s);
        }

        let results = pool.step_all(actions);
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        out.env_steps += pool.slots.len() as u64;

        let mut r = 0;
        let mut pending = Vec::new();
        let mut finished = Vec::new();
        for (k, (slot, res)) in pool.slots.iter_mut().zip(results).enumerate() {
            let n = slot.traj.len();
            let mut stepped = vec![false; n];
            while r < rows.len() && rows[r].0 == k {
                let i = rows[r].1;
                stepped[i] = true;
                slot.traj[i].steps.push(Transition {
                    obs: std::mem::take(&mut slot.obs[i]),
                    raw_action: samples[r].raw,
                    log_prob: samples[r].log_prob,
                    value: net.value[r],
                    reward: res.rewards[i],
                    h: h_before[r * hd..(r + 1) * hd].to_vec(),
                    c: c_before[r * hd..(r + 1) * hd].to_vec(),
                });
                slot.h[i].copy_from_slice(&h[r * hd..(r + 1) * hd]);
                slot.c[i].copy_from_slice(&c[r * hd..(r + 1) * hd]);
                if !res.statuses[i].is_active() {
                    slot.traj[i].terminal = true;
                }
                count += 1;
                r += 1;
            }
            for i in 0..n {
                // A teammate's reach also pays agents that crashed earlier.
                if !stepped[i] && res.rewards[i] != 0.0 {
                    if let Some(last) = slot.traj[i].steps.last_mut() {
                        last.reward += res.rewards[i];
                    }
                }
                slot.episode_reward[i] += res.rewards[i];
            }
            slot.obs = res.observations;
            if res.done {
                let cause = res.info.done_cause;
                for (i, t) in slot.traj.iter_mut().enumerate() {
                    if cause == Some(DoneCause::TimeLimit) && matches!(res.statuses[i], AgentStatus::Active) {
                        t.truncated = true;
                        pending.push((k, i));
                    } else {
                        t.terminal = true;
                    }
                }
                let success = cause == Some(DoneCause::Reached);
                out.episodes.push(EpisodeStats {
                    env: k,
                    reward: slot.episode_reward.iter().sum::<f64>() / n as f64,
                    length: res.info.step,
                    success,
                    epsilon: res.info.epsilon,
                });
                curriculum.on_episode_end(success);
                slot.running = false;
                finished.push(k);
            }
        }
        let values = bootstrap_values(pool, params, &pending)?;
        for (&(k, i), v) in pending.iter().zip(values) {
            pool.slots[k].traj[i].bootstrap = v;
        }
        for k in finished {
            flush(&mut pool.slots[k], k, &mut out.buffer);
        }
    }

    // Cut running episodes; they resume in the next phase.
    let mut pending = Vec::new();
    for (k, s) in pool.slots.iter().enumerate() {
        if s.running {
            for (i, st) in s.env.statuses().iter().enumerate() {
                if st.is_active() && !s.traj[i].steps.is_empty() {
                    pending.push((k, i));
                }
            }
        }
    }
    let values = bootstrap_values(pool, params, &pending)?;
    for (&(k, i), v) in pending.iter().zip(values) {
        pool.slots[k].traj[i].bootstrap = v;
    }
    for k in 0..pool.slots.len() {
        if pool.slots[k].running {
            flush(&mut pool.slots[k], k, &mut out.buffer);
        }
    }
    Ok(out)
}

fn flush(slot: &mut Slot, k: usize, buffer: &mut RolloutBuffer) {
    for (i, t) in slot.traj.iter_mut().enumerate() {
        let done = std::mem::replace(t, Trajectory::new(k, i));
        if !done.steps.is_empty() {
            buffer.trajectories.push(done);
        }
    }
}

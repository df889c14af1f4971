//! The collaborative target search world.
//!
//! An [`Environment`] owns one room, its drones and its random stream. Each
//! episode spawns a target either in the visible ball or at one of the hidden
//! spots, chosen by the spawning threshold `epsilon`, then steps all active
//! drones under velocity commands until one of them reaches the target, all
//! of them crash, or the step limit runs out.
//!
//! Per-agent observation layout (length `5K + 17` for `K` rays):
//!
//! | block | size | content |
//! |---|---|---|
//! | rays | `5K` | per ray: normalized hit distance, one-hot class (obstacle, teammate, target, none) |
//! | position | 3 | world position, m |
//! | attitude | 4 | unit quaternion, scalar first |
//! | forward | 3 | unit body-x axis in the world frame |
//! | last action | 4 | previous command divided by its bound |
//! | teammate | 3 | relative position of the nearest active teammate, zero when alone |

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, QuadState, Vec3, VelocityCommand};
use crate::error::{Error, Result};
use crate::geometry::{ray_aabb, ray_room_exit, ray_sphere, Aabb, YawBox};
use crate::rng::seeded;
use crate::world::WorldConfig;

/// Values per ray in the observation.
pub const RAY_FEATURES: usize = 5;
/// Non-ray observation entries.
pub const STATE_FEATURES: usize = 17;
/// Reward broadcast to every agent when any agent reaches the target.
pub const REACH_REWARD: f64 = 5.0;
/// Constant part of the crash penalty.
pub const CRASH_OFFSET: f64 = -3.0;

const SPAWN_RETRIES: usize = 100;

pub fn observation_len(num_rays: usize) -> usize {
    RAY_FEATURES * num_rays + STATE_FEATURES
}

/// What a ray ran into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayClass {
    /// Furniture, walls, floor or ceiling.
    Obstacle = 0,
    Teammate = 1,
    Target = 2,
    None = 3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Hit distance divided by the sensor range, in `[0, 1]`.
    pub distance: f64,
    pub class: RayClass,
}

impl RayHit {
    pub const MISS: RayHit = RayHit {
        distance: 1.0,
        class: RayClass::None,
    };
}

/// A spawned target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Center of the target box, m.
    pub position: Vec3,
    /// Edge length of the cube, m.
    pub scale: f64,
    /// Heading of the cube, degrees.
    pub yaw_deg: f64,
    /// Drawn from the hidden set rather than the visible ball.
    pub hidden: bool,
}

impl TargetSpec {
    pub fn shape(&self) -> YawBox {
        YawBox {
            center: self.position,
            half: Vec3::repeat(0.5 * self.scale),
            yaw: self.yaw_deg.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AgentStatus {
    Active,
    Crashed { step: usize },
    Reached { step: usize },
}

impl AgentStatus {
    pub fn is_active(&self) -> bool {
        matches!(self, AgentStatus::Active)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalEvent {
    Reached,
    Crashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneCause {
    Reached,
    AllCrashed,
    TimeLimit,
}

/// What happened to which agent during a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub agent: usize,
    pub event: TerminalEvent,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: usize,
    pub target: TargetSpec,
    pub epsilon: f64,
    pub events: Vec<AgentEvent>,
    pub done_cause: Option<DoneCause>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub statuses: Vec<AgentStatus>,
    pub done: bool,
    pub info: StepInfo,
}

/// Static and dynamic geometry visible to the ray sensor.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub room: Aabb,
    pub obstacles: &'a [Aabb],
    /// Centers of all drones, including the observer.
    pub drones: &'a [Vec3],
    pub drone_radius: f64,
    pub target: Option<YawBox>,
}

impl Scene<'_> {
    /// Nearest hit along a world-frame unit ray, skipping drone `skip`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, skip: usize, max_range: f64) -> RayHit {
        let mut best = ray_room_exit(origin, dir, &self.room);
        let mut class = RayClass::Obstacle;
        for b in self.obstacles {
            if let Some(t) = ray_aabb(origin, dir, b) {
                if t < best {
                    best = t;
                    class = RayClass::Obstacle;
                }
            }
        }
        for (j, c) in self.drones.iter().enumerate() {
            if j == skip {
                continue;
            }
            if let Some(t) = ray_sphere(origin, dir, c, self.drone_radius) {
                if t < best {
                    best = t;
                    class = RayClass::Teammate;
                }
            }
        }
        if let Some(target) = &self.target {
            if let Some(t) = target.ray_hit(origin, dir) {
                if t < best {
                    best = t;
                    class = RayClass::Target;
                }
            }
        }
        if best > max_range {
            RayHit::MISS
        } else {
            RayHit {
                distance: best / max_range,
                class,
            }
        }
    }
}

/// Cast the body-frame fan `body_dirs` from drone `index`.
pub fn cast_rays(
    state: &QuadState,
    index: usize,
    scene: &Scene<'_>,
    body_dirs: &[Vec3],
    max_range: f64,
) -> Vec<RayHit> {
    let r = dynamics::body_to_world(&state.q_wb);
    body_dirs
        .iter()
        .map(|d| scene.cast(&state.p_w, &(r * d), index, max_range))
        .collect()
}

/// Relative position of the closest active teammate of agent `index`, or
/// zero when there is none. Ties go to the lower index.
pub fn nearest_teammate(index: usize, positions: &[Vec3], active: &[bool]) -> Vec3 {
    let me = positions[index];
    let mut best: Option<(f64, Vec3)> = None;
    for (j, p) in positions.iter().enumerate() {
        if j == index || !active[j] {
            continue;
        }
        let rel = p - me;
        let d = rel.norm_squared();
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, rel));
        }
    }
    best.map_or_else(Vec3::zeros, |(_, rel)| rel)
}

/// Crash penalty: remaining distance relative to the initial distance,
/// heading misalignment and a constant offset.
pub fn crash_penalty(
    crash_position: &Vec3,
    initial_position: &Vec3,
    target_position: &Vec3,
    forward: &Vec3,
    alpha: f64,
    beta: f64,
) -> f64 {
    let d_t = target_position - crash_position;
    let d_init = (target_position - initial_position).norm().max(1e-9);
    let dist = d_t.norm();
    let heading = if dist < 1e-6 || forward.norm() < 1e-12 {
        0.0
    } else {
        (d_t.dot(forward) / (dist * forward.norm())).clamp(-1.0, 1.0).acos()
    };
    -alpha * dist / d_init - beta / std::f64::consts::PI * heading + CRASH_OFFSET
}

/// Terminal reward for one agent.
pub fn terminal_reward(
    event: TerminalEvent,
    crash_position: &Vec3,
    initial_position: &Vec3,
    target_position: &Vec3,
    forward: &Vec3,
    alpha: f64,
    beta: f64,
) -> f64 {
    match event {
        TerminalEvent::Reached => REACH_REWARD,
        TerminalEvent::Crashed => crash_penalty(
            crash_position,
            initial_position,
            target_position,
            forward,
            alpha,
            beta,
        ),
    }
}

fn uniform_in_ball(rng: &mut impl Rng, center: &Vec3, radius: f64) -> Vec3 {
    if radius == 0.0 {
        return *center;
    }
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        if v.norm_squared() <= 1.0 {
            return center + v * radius;
        }
    }
}

/// Whether a target placement lies inside the room and clear of furniture.
pub fn target_is_valid(cfg: &WorldConfig, target: &TargetSpec) -> bool {
    let bounds = target.shape().bounds();
    cfg.room_box().contains_box(&bounds) && !cfg.obstacles.iter().any(|o| o.aabb().overlaps(&bounds))
}

/// Draw a target. With probability `1 - epsilon` it lies uniformly in the
/// visible ball, otherwise at a uniformly chosen hidden spot. Overlapping
/// placements are redrawn.
pub fn spawn_target(cfg: &WorldConfig, epsilon: f64, rng: &mut impl Rng) -> Result<TargetSpec> {
    let r = &cfg.randomization;
    for _ in 0..SPAWN_RETRIES {
        let r_seed: f64 = rng.gen();
        let hidden = r_seed <= epsilon;
        let position = if hidden {
            cfg.hidden[rng.gen_range(0..cfg.hidden.len())]
        } else {
            uniform_in_ball(rng, &cfg.spawn_sphere.center, cfg.spawn_sphere.radius)
        };
        let (scale, yaw_deg) = if r.enabled {
            (
                rng.gen_range(r.target_scale_min..=r.target_scale_max),
                rng.gen_range(r.target_yaw_min_deg..=r.target_yaw_max_deg),
            )
        } else {
            (r.nominal_scale(), 0.0)
        };
        let target = TargetSpec {
            position,
            scale,
            yaw_deg,
            hidden,
        };
        if target_is_valid(cfg, &target) {
            return Ok(target);
        }
    }
    Err(Error::SpawnTarget(SPAWN_RETRIES))
}

/// Distance from a drone center to the target center at which the target
/// counts as reached.
pub fn reach_distance(cfg: &WorldConfig, target: &TargetSpec) -> f64 {
    cfg.drone_radius + 0.5 * target.scale + cfg.reach_margin
}

/// One step of a recorded episode, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u64,
    pub step: usize,
    pub epsilon: f64,
    pub target: TargetSpec,
    pub positions: Vec<Vec3>,
    pub attitudes: Vec<dynamics::Quat>,
    pub actions: Vec<[f64; 4]>,
    pub rewards: Vec<f64>,
    pub statuses: Vec<AgentStatus>,
    pub done: bool,
    pub done_cause: Option<DoneCause>,
}

/// A single search room with its drones.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: WorldConfig,
    rng: ChaCha8Rng,
    body_dirs: Vec<Vec3>,
    obstacles: Vec<Aabb>,
    states: Vec<QuadState>,
    initial: Vec<Vec3>,
    statuses: Vec<AgentStatus>,
    last_actions: Vec<[f64; 4]>,
    target: TargetSpec,
    epsilon: f64,
    step: usize,
    episode: u64,
    done: bool,
    started: bool,
    trace: Option<Vec<TraceRecord>>,
}

impl Environment {
    pub fn new(cfg: WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let body_dirs = cfg.sensor.directions();
        let obstacles = cfg.obstacles.iter().map(|o| o.aabb()).collect();
        let n = cfg.agents;
        let placeholder = TargetSpec {
            position: cfg.spawn_sphere.center,
            scale: cfg.randomization.nominal_scale(),
            yaw_deg: 0.0,
            hidden: false,
        };
        Ok(Self {
            rng: seeded(seed, 0),
            body_dirs,
            obstacles,
            states: vec![QuadState::at_rest(Vec3::zeros(), 0.0); n],
            initial: vec![Vec3::zeros(); n],
            statuses: vec![AgentStatus::Active; n],
            last_actions: vec![[0.0; 4]; n],
            target: placeholder,
            epsilon: 0.0,
            step: 0,
            episode: 0,
            done: true,
            started: false,
            trace: None,
            cfg,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn num_agents(&self) -> usize {
        self.cfg.agents
    }

    pub fn observation_len(&self) -> usize {
        observation_len(self.body_dirs.len())
    }

    pub fn states(&self) -> &[QuadState] {
        &self.states
    }

    pub fn statuses(&self) -> &[AgentStatus] {
        &self.statuses
    }

    pub fn target(&self) -> &TargetSpec {
        &self.target
    }

    pub fn initial_positions(&self) -> &[Vec3] {
        &self.initial
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Record every step from the next reset onward.
    pub fn set_tracing(&mut self, on: bool) {
        self.trace = on.then(Vec::new);
    }

    /// Drain the recorded trace.
    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Overwrite agent states, e.g. for scripted scenarios in tests.
    pub fn set_states(&mut self, states: &[QuadState]) {
        assert_eq!(states.len(), self.states.len());
        self.states.copy_from_slice(states);
    }

    /// Replace the target of the running episode.
    pub fn set_target(&mut self, target: TargetSpec) {
        self.target = target;
    }

    fn positions(&self) -> Vec<Vec3> {
        self.states.iter().map(|s| s.p_w).collect()
    }

    fn collides_static(&self, p: &Vec3) -> bool {
        let r = self.cfg.drone_radius;
        (0..3).any(|i| p[i] - r < 0.0 || p[i] + r > self.cfg.room[i])
            || self.obstacles.iter().any(|b| b.intersects_sphere(p, r))
    }

    /// Start a new episode with spawning threshold `epsilon`.
    pub fn reset(&mut self, epsilon: f64) -> Result<Vec<Vec<f64>>> {
        let epsilon = epsilon.clamp(0.0, 1.0);
        self.target = spawn_target(&self.cfg, epsilon, &mut self.rng)?;
        let rnd = self.cfg.randomization;
        let n = self.cfg.agents;
        let base_yaw = self.cfg.start_area.yaw_deg;
        let reach = reach_distance(&self.cfg, &self.target);
        let mut placed = false;
        for _ in 0..SPAWN_RETRIES {
            let mut states = Vec::with_capacity(n);
            for c in &self.cfg.start_area.centers[..n] {
                let (p, yaw) = if rnd.enabled {
                    (
                        uniform_in_ball(&mut self.rng, c, rnd.position_noise),
                        base_yaw + self.rng.gen_range(-rnd.yaw_noise_deg..=rnd.yaw_noise_deg),
                    )
                } else {
                    (*c, base_yaw)
                };
                states.push(QuadState::at_rest(p, yaw.to_radians()));
            }
            let clear = states.iter().enumerate().all(|(i, s)| {
                !self.collides_static(&s.p_w)
                    && (s.p_w - self.target.position).norm() > reach
                    && self.target.shape().distance_to(&s.p_w) >= self.cfg.drone_radius
                    && states[..i]
                        .iter()
                        .all(|o| (o.p_w - s.p_w).norm() >= 2.0 * self.cfg.drone_radius)
            });
            if clear {
                self.states = states;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SpawnAgents(SPAWN_RETRIES));
        }
        self.initial = self.positions();
        self.statuses = vec![AgentStatus::Active; n];
        self.last_actions = vec![[0.0; 4]; n];
        self.epsilon = epsilon;
        self.step = 0;
        self.done = false;
        if self.started {
            self.episode += 1;
        }
        self.started = true;
        if self.trace.is_some() {
            let rec = self.trace_record(&vec![0.0; n], None);
            if let Some(t) = self.trace.as_mut() {
                t.push(rec);
            }
        }
        Ok(self.observations())
    }

    fn trace_record(&self, rewards: &[f64], cause: Option<DoneCause>) -> TraceRecord {
        TraceRecord {
            episode: self.episode,
            step: self.step,
            epsilon: self.epsilon,
            target: self.target,
            positions: self.positions(),
            attitudes: self.states.iter().map(|s| s.q_wb).collect(),
            actions: self.last_actions.clone(),
            rewards: rewards.to_vec(),
            statuses: self.statuses.clone(),
            done: self.done,
            done_cause: cause,
        }
    }

    /// Advance every active agent by one command.
    pub fn step(&mut self, actions: &[VelocityCommand]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let n = self.cfg.agents;
        if actions.len() != n {
            return Err(Error::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let params = self.cfg.dynamics;
        let mode = self.cfg.dynamics_mode;
        self.step += 1;
        let mut rewards = vec![0.0; n];
        let existential = -1.0 / self.cfg.t_max as f64;

        for i in 0..n {
            if !self.statuses[i].is_active() {
                continue;
            }
            let cmd = actions[i].clamped(&params);
            self.states[i] = dynamics::step(mode, &self.states[i], &cmd, &params)?;
            self.last_actions[i] = [
                cmd.vx / params.max_velocity,
                cmd.vy / params.max_velocity,
                cmd.vz / params.max_velocity,
                cmd.yaw_rate / params.max_yaw_rate,
            ];
            rewards[i] += existential;
        }

        let positions = self.positions();
        let target_shape = self.target.shape();
        let reach = reach_distance(&self.cfg, &self.target);
        let r = self.cfg.drone_radius;
        let mut events = Vec::new();
        let was_active: Vec<bool> = self.statuses.iter().map(|s| s.is_active()).collect();
        for i in 0..n {
            if !was_active[i] {
                continue;
            }
            let p = positions[i];
            let reached = (p - self.target.position).norm() <= reach || target_shape.distance_to(&p) < r;
            if reached {
                self.statuses[i] = AgentStatus::Reached { step: self.step };
                events.push(AgentEvent {
                    agent: i,
                    event: TerminalEvent::Reached,
                    position: p,
                });
                continue;
            }
            let hit_drone = positions
                .iter()
                .enumerate()
                .any(|(j, q)| j != i && (q - p).norm() < 2.0 * r);
            if self.collides_static(&p) || hit_drone {
                self.statuses[i] = AgentStatus::Crashed { step: self.step };
                rewards[i] += crash_penalty(
                    &p,
                    &self.initial[i],
                    &self.target.position,
                    &self.states[i].forward(),
                    self.cfg.alpha,
                    self.cfg.beta,
                );
                self.states[i].v_w = Vec3::zeros();
                self.states[i].omega_b = Vec3::zeros();
                events.push(AgentEvent {
                    agent: i,
                    event: TerminalEvent::Crashed,
                    position: p,
                });
            }
        }

        let any_reached = self
            .statuses
            .iter()
            .any(|s| matches!(s, AgentStatus::Reached { .. }));
        let cause = if any_reached {
            for rw in rewards.iter_mut() {
                *rw += REACH_REWARD;
            }
            Some(DoneCause::Reached)
        } else if self.statuses.iter().all(|s| matches!(s, AgentStatus::Crashed { .. })) {
            Some(DoneCause::AllCrashed)
        } else if self.step >= self.cfg.t_max {
            Some(DoneCause::TimeLimit)
        } else {
            None
        };
        self.done = cause.is_some();

        if self.trace.is_some() {
            let rec = self.trace_record(&rewards, cause);
            if let Some(t) = self.trace.as_mut() {
                t.push(rec);
            }
        }

        Ok(StepResult {
            observations: self.observations(),
            rewards,
            statuses: self.statuses.clone(),
            done: self.done,
            info: StepInfo {
                step: self.step,
                target: self.target,
                epsilon: self.epsilon,
                events,
                done_cause: cause,
            },
        })
    }

    /// Observations of all agents for the current state.
    pub fn observations(&mut self) -> Vec<Vec<f64>> {
        (0..self.cfg.agents).map(|i| self.observe(i)).collect()
    }

    fn observe(&mut self, index: usize) -> Vec<f64> {
        let positions = self.positions();
        let active: Vec<bool> = self.statuses.iter().map(|s| s.is_active()).collect();
        let scene = Scene {
            room: self.cfg.room_box(),
            obstacles: &self.obstacles,
            drones: &positions,
            drone_radius: self.cfg.drone_radius,
            target: Some(self.target.shape()),
        };
        let state = self.states[index];
        let hits = cast_rays(&state, index, &scene, &self.body_dirs, self.cfg.sensor.max_range);
        let mut obs = Vec::with_capacity(self.observation_len());
        let noise = self.cfg.randomization.ray_noise_std;
        let noisy = self.cfg.randomization.enabled && noise > 0.0;
        let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
        for h in hits {
            let d = if noisy {
                (h.distance + normal.sample(&mut self.rng)).clamp(0.0, 1.0)
            } else {
                h.distance
            };
            obs.push(d);
            let mut onehot = [0.0; 4];
            onehot[h.class as usize] = 1.0;
            obs.extend_from_slice(&onehot);
        }
        obs.extend(state.p_w.iter());
        obs.extend(state.q_wb.iter());
        obs.extend(state.forward().iter());
        obs.extend(self.last_actions[index].iter());
        obs.extend(nearest_teammate(index, &positions, &active).iter());
        obs
    }
}

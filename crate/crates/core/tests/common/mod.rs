//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use cts_core::dynamics::{QuadState, Quat, Vec3, VelocityCommand};
use cts_core::env::{
    cast_rays, reach_distance, spawn_target, AgentStatus, DoneCause, Environment, RayClass, RayHit, Scene, TargetSpec,
    REACH_REWARD,
};
use cts_core::geometry::{Aabb, YawBox};
use cts_core::world::WorldConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Distance at which a ray first touches an axis-aligned box, found by
/// intersecting each face plane and testing the hit point against the face.
pub fn face_hit(o: &Vec3, d: &Vec3, min: &Vec3, max: &Vec3) -> Option<f64> {
    if (0..3).all(|i| o[i] >= min[i] && o[i] <= max[i]) {
        return Some(0.0);
    }
    let mut best: Option<f64> = None;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            continue;
        }
        for plane in [min[axis], max[axis]] {
            let t = (plane - o[axis]) / d[axis];
            if t < 0.0 {
                continue;
            }
            let p = o + d * t;
            let inside = (0..3).filter(|&k| k != axis).all(|k| p[k] >= min[k] && p[k] <= max[k]);
            if inside && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

/// Distance to the room boundary from an interior point.
pub fn room_exit(o: &Vec3, d: &Vec3, room: &Vec3) -> f64 {
    let mut best = f64::INFINITY;
    for axis in 0..3 {
        let wall = if d[axis] > 0.0 {
            room[axis]
        } else if d[axis] < 0.0 {
            0.0
        } else {
            continue;
        };
        best = best.min((wall - o[axis]) / d[axis]);
    }
    best.max(0.0)
}

/// Geometric (closest-approach) ray-sphere test.
pub fn sphere_hit(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<f64> {
    let oc = c - o;
    if oc.norm() <= r {
        return Some(0.0);
    }
    let tc = oc.dot(d);
    if tc < 0.0 {
        return None;
    }
    let miss2 = oc.norm_squared() - tc * tc;
    if miss2 > r * r {
        return None;
    }
    Some(tc - (r * r - miss2).sqrt())
}

pub fn yaw_box_hit(o: &Vec3, d: &Vec3, b: &YawBox) -> Option<f64> {
    let (s, c) = (-b.yaw).sin_cos();
    let rot = |v: &Vec3| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
    face_hit(&rot(&(o - b.center)), &rot(d), &(-b.half), &b.half)
}

pub struct SceneData {
    pub room: Vec3,
    pub obstacles: Vec<Aabb>,
    pub drones: Vec<Vec3>,
    pub radius: f64,
    pub target: Option<YawBox>,
}

/// Nearest hit over every primitive; ties resolve walls/furniture first,
/// then drones, then the target.
pub fn brute_force_cast(scene: &SceneData, o: &Vec3, d: &Vec3, skip: usize, max_range: f64) -> RayHit {
    let mut hits: Vec<(f64, RayClass)> = vec![(room_exit(o, d, &scene.room), RayClass::Obstacle)];
    hits.extend(scene.obstacles.iter().filter_map(|b| face_hit(o, d, &b.min, &b.max)).map(|t| (t, RayClass::Obstacle)));
    for (j, c) in scene.drones.iter().enumerate() {
        if j != skip {
            hits.extend(sphere_hit(o, d, c, scene.radius).map(|t| (t, RayClass::Teammate)));
        }
    }
    if let Some(b) = &scene.target {
        hits.extend(yaw_box_hit(o, d, b).map(|t| (t, RayClass::Target)));
    }
    let (t, class) = hits
        .into_iter()
        .fold((f64::INFINITY, RayClass::None), |best, h| if h.0 < best.0 { h } else { best });
    if t > max_range {
        RayHit::MISS
    } else {
        RayHit {
            distance: t / max_range,
            class,
        }
    }
}

/// Rotation of body vectors into the world for a scalar-first quaternion,
/// via `q v q*`.
pub fn rotate(q: &Quat, v: &Vec3) -> Vec3 {
    let w = q[0];
    let u = Vec3::new(q[1], q[2], q[3]);
    v * (w * w - u.dot(&u)) + u * (2.0 * u.dot(v)) + u.cross(v) * (2.0 * w)
}

pub fn random_unit_quat(rng: &mut impl Rng) -> Quat {
    loop {
        let q = Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return q / n;
        }
    }
}

/// A random room with up to six boxes, one to three drones and maybe a
/// yawed target. Returns the scene and the observer state (drone 0).
pub fn random_scene(rng: &mut impl Rng) -> (SceneData, QuadState) {
    let room = Vec3::new(rng.gen_range(3.0..12.0), rng.gen_range(3.0..12.0), rng.gen_range(2.0..4.0));
    let point = |rng: &mut dyn rand::RngCore, margin: f64| {
        Vec3::new(
            rng.gen_range(margin..room.x - margin),
            rng.gen_range(margin..room.y - margin),
            rng.gen_range(margin..room.z - margin),
        )
    };
    let obstacles = (0..rng.gen_range(0..=6))
        .map(|_| {
            let c = point(rng, 0.3);
            let h = Vec3::new(rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
            Aabb::new(c - h, c + h)
        })
        .collect();
    let radius = rng.gen_range(0.05..0.3);
    let drones = (0..rng.gen_range(1..=3)).map(|_| point(rng, 0.3)).collect::<Vec<_>>();
    let target = rng.gen_bool(0.8).then(|| YawBox {
        center: point(rng, 0.5),
        half: Vec3::repeat(rng.gen_range(0.05..0.4)),
        yaw: rng.gen_range(-3.2..3.2),
    });
    let mut state = QuadState::at_rest(drones[0], 0.0);
    state.q_wb = random_unit_quat(rng);
    (
        SceneData {
            room,
            obstacles,
            drones,
            radius,
            target,
        },
        state,
    )
}

/// Crash penalty recomputed with `atan2` for the heading angle.
pub fn crash_formula(p: &Vec3, init: &Vec3, target: &Vec3, forward: &Vec3, alpha: f64, beta: f64) -> f64 {
    let d = target - p;
    let angle = d.cross(forward).norm().atan2(d.dot(forward));
    -alpha * d.norm() / (target - init).norm() - beta * angle / std::f64::consts::PI - 3.0
}

/// Largest normalized-distance gap between the sensor and the face-plane
/// oracle over `scenes` random scenes, plus the number of class mismatches.
pub fn ray_disagreement(scenes: usize, seed: u64) -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = WorldConfig::default_room().sensor.directions();
    let (mut worst, mut class_errors, mut rays) = (0.0f64, 0, 0);
    for _ in 0..scenes {
        let (s, state) = random_scene(&mut rng);
        let max_range = rng.gen_range(2.0..12.0);
        let obstacles = s.obstacles.clone();
        let scene = Scene {
            room: cts_core::geometry::Aabb::new(Vec3::zeros(), s.room),
            obstacles: &obstacles,
            drones: &s.drones,
            drone_radius: s.radius,
            target: s.target,
        };
        let hits = cast_rays(&state, 0, &scene, &dirs, max_range);
        for (d, h) in dirs.iter().zip(&hits) {
            let expect = brute_force_cast(&s, &state.p_w, &rotate(&state.q_wb, d), 0, max_range);
            rays += 1;
            if expect.class != h.class {
                class_errors += 1;
            }
            worst = worst.max((expect.distance - h.distance).abs());
        }
    }
    (worst, class_errors, rays)
}

/// Places drone 0 so it overlaps a wall or a piece of furniture and checks
/// the crash reward against the formula. Returns the largest error, the
/// largest penalty seen and the number of configurations.
pub fn crash_reward_errors(configs: usize, seed: u64) -> (f64, f64, usize) {
    let world = WorldConfig::default_room().with_agents(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Environment::new(world.clone(), seed).unwrap();
    let existential = -1.0 / world.t_max as f64;
    let (mut worst, mut max_penalty, mut checked) = (0.0f64, f64::NEG_INFINITY, 0);
    while checked < configs {
        env.reset(rng.gen_range(0.0..=1.0)).unwrap();
        let r = world.drone_radius;
        let p = if rng.gen_bool(0.5) || world.obstacles.is_empty() {
            // Just through one of the six room faces.
            let axis = rng.gen_range(0..3);
            let mut p = Vec3::new(
                rng.gen_range(r..world.room.x - r),
                rng.gen_range(r..world.room.y - r),
                rng.gen_range(r..world.room.z - r),
            );
            p[axis] = if rng.gen_bool(0.5) { rng.gen_range(0.0..r) } else { world.room[axis] - rng.gen_range(0.0..r) };
            p
        } else {
            let b = world.obstacles[rng.gen_range(0..world.obstacles.len())].aabb();
            Vec3::new(
                rng.gen_range(b.min.x..b.max.x),
                rng.gen_range(b.min.y..b.max.y),
                rng.gen_range(b.min.z..b.max.z),
            )
        };
        let target = *env.target();
        if (p - target.position).norm() <= reach_distance(&world, &target) + 0.05
            || target.shape().distance_to(&p) < r + 0.05
        {
            continue;
        }
        let mut s = QuadState::at_rest(p, rng.gen_range(-3.1..3.1));
        s.q_wb = random_unit_quat(&mut rng);
        env.set_states(&[s]);
        let out = env.step(&[VelocityCommand::default()]).unwrap();
        assert_eq!(out.statuses[0], AgentStatus::Crashed { step: 1 });
        let after = env.states()[0];
        let expect = crash_formula(
            &after.p_w,
            &env.initial_positions()[0],
            &target.position,
            &after.forward(),
            world.alpha,
            world.beta,
        );
        let got = out.rewards[0] - existential;
        worst = worst.max((got - expect).abs());
        max_penalty = max_penalty.max(got);
        checked += 1;
    }
    (worst, max_penalty, checked)
}

/// Every agent, crashed ones included, receives exactly the reach bonus on
/// top of its own step reward.
pub fn broadcast_is_exact(seed: u64) -> bool {
    let world = WorldConfig::default_room().without_obstacles().with_agents(3);
    let mut env = Environment::new(world.clone(), seed).unwrap();
    env.reset(0.0).unwrap();
    let target = TargetSpec {
        position: Vec3::new(2.5, 3.5, 1.5),
        scale: 0.3,
        yaw_deg: 0.0,
        hidden: false,
    };
    env.set_target(target);
    // Agent 2 crashes into the floor first.
    let mut s = env.states().to_vec();
    s[2].p_w.z = 0.01;
    env.set_states(&s);
    let first = env.step(&[VelocityCommand::default(); 3]).unwrap();
    if !matches!(first.statuses[2], AgentStatus::Crashed { .. }) || first.done {
        return false;
    }
    // Agent 0 touches the target.
    let mut s = env.states().to_vec();
    s[0].p_w = target.position + Vec3::new(0.0, -0.2, 0.0);
    env.set_states(&s);
    let out = env.step(&[VelocityCommand::default(); 3]).unwrap();
    let existential = -1.0 / world.t_max as f64;
    out.info.done_cause == Some(DoneCause::Reached)
        && out.rewards[0] == existential + REACH_REWARD
        && out.rewards[1] == existential + REACH_REWARD
        && out.rewards[2] == REACH_REWARD
}

/// Hidden fraction of `draws` spawns at threshold `epsilon`.
pub fn hidden_fraction(epsilon: f64, draws: usize, seed: u64) -> f64 {
    let world = WorldConfig::default_room();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = (0..draws)
        .filter(|_| spawn_target(&world, epsilon, &mut rng).unwrap().hidden)
        .count();
    hidden as f64 / draws as f64
}

/// Advantages straight from the definition: discounted sums of TD errors,
/// with every weight written out as a product over the intervening steps.
pub fn gae_by_definition(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next_value = |t: usize| if t + 1 < n { values[t + 1] } else { bootstrap };
    let td = |t: usize| rewards[t] + gamma * next_value(t) * if dones[t] { 0.0 } else { 1.0 } - values[t];
    (0..n)
        .map(|t| {
            (t..n)
                .map(|k| {
                    let weight: f64 = (t..k).map(|j| if dones[j] { 0.0 } else { gamma * lambda }).product();
                    weight * td(k)
                })
                .sum()
        })
        .collect()
}

/// Worst relative error between the analytic loss gradient and central
/// differences, over every parameter of an `H = 8` network on a random
/// packed batch of sequences with lengths 4, 3 and 1.
pub fn gradient_check(seed: u64) -> (f64, usize) {
    use cts_core::policy::{ActionDistribution, LossConfig, NetConfig, PolicyParams, SequenceBatch, ACTION_DIM};
    let net = NetConfig {
        num_rays: 2,
        encoder_hidden: 5,
        encoder_out: 4,
        trunk: 6,
        hidden: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::init(net, seed).unwrap();
    for v in p.data.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let lens = [4usize, 3, 1];
    let steps: Vec<usize> = (0..4).map(|t| lens.iter().filter(|&&l| l > t).count()).collect();
    let n: usize = lens.iter().sum();
    let (d, hd) = (net.input_dim(), net.hidden);
    let mut u = |k: usize, s: f64| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-s..s)).collect() };
    let mut batch = SequenceBatch {
        obs: u(n * d, 1.0),
        raw_actions: u(n * ACTION_DIM, 1.5),
        old_log_probs: vec![0.0; n],
        advantages: u(n, 2.0),
        returns: u(n, 1.0),
        steps_per_time: steps.clone(),
        h0: u(3 * hd, 0.5),
        c0: u(3 * hd, 0.5),
    };
    // Old log-probs close to the current ones so that some rows sit inside
    // the clip range and some outside.
    let cfg = LossConfig::default();
    let (mut h, mut c) = (batch.h0.clone(), batch.c0.clone());
    let mut row = 0;
    for &k in &steps {
        let out = p
            .forward_batch(&batch.obs[row * d..(row + k) * d], k, &mut h[..k * hd], &mut c[..k * hd])
            .unwrap();
        for i in 0..k {
            let r = row + i;
            let dist = ActionDistribution::new(std::array::from_fn(|j| out.mean[i * ACTION_DIM + j]), p.log_std(), cfg.bounds);
            let raw: [f64; ACTION_DIM] = std::array::from_fn(|j| batch.raw_actions[r * ACTION_DIM + j]);
            batch.old_log_probs[r] = dist.log_prob(&raw) + if r % 3 == 0 { 0.5 } else { 0.05 };
        }
        row += k;
    }
    let mut g = vec![0.0; p.data.len()];
    p.loss_and_grad(&batch, &cfg, &mut g).unwrap();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..p.data.len() {
        let mut q = p.clone();
        q.data[i] += eps;
        let lp = q.loss(&batch, &cfg).unwrap().total;
        q.data[i] -= 2.0 * eps;
        let lm = q.loss(&batch, &cfg).unwrap().total;
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max((fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6));
    }
    (worst, p.data.len())
}

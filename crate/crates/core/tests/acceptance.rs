//! Acceptance run: one `PASS`/`FAIL` line per criterion.
//!
//! `CTS_ACCEPTANCE=1,4,9` limits the run to the listed criteria. Criteria
//! 5-7 train policies and dominate the runtime (tens of minutes on one
//! core).

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use cts_core::curriculum::{AdaptiveSettings, CurriculumMode, CurriculumState};
use cts_core::dynamics::{skew_omega, step_kinematic, step_tracked, QuadParams, QuadState, Vec3, VelocityCommand};
use cts_core::env::Environment;
use cts_core::eval::{self, Controller, EvalReport, EvalSettings};
use cts_core::policy::{load_checkpoint, NetConfig, PolicyParams};
use cts_core::ppo::{compute_gae, train, MetricsRow, PpoConfig, StageConfig, TrainConfig, TrainSummary};
use cts_core::world::WorldConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }

    fn with(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("CTS_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().map_or(true, |o| o.contains(&k));
    let scratch = tempfile::tempdir().expect("temp dir");

    let criteria: [(u32, &str, &dyn Fn(&Path) -> Verdict); 9] = [
        (1, "oracle suites", &|_| oracle_suites()),
        (2, "spawning statistics", &|_| spawning_statistics()),
        (3, "reward oracle", &|_| reward_oracle()),
        (4, "curriculum behavior", &|_| curriculum_behavior()),
        (5, "learning smoke test", &|_| learning_smoke_test()),
        (6, "multi-stage data efficiency", &multi_stage),
        (7, "scalability matrix", &scalability),
        (8, "determinism", &|_| determinism()),
        (9, "throughput", &|_| throughput()),
    ];
    let mut failed = 0;
    for (k, name, run) in criteria {
        if !wanted(k) {
            continue;
        }
        let t0 = Instant::now();
        let v = run(scratch.path());
        let secs = t0.elapsed().as_secs_f64();
        for d in &v.details {
            println!("    {d}");
        }
        println!(
            "criterion {k}: {} - {name}: {} [{secs:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.summary
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(t0: Instant, limit: Duration) -> bool {
    t0.elapsed() <= limit
}

fn oracle_suites() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = QuadParams::default();
    let cmd = |rng: &mut ChaCha8Rng| {
        let b = params.max_velocity;
        let w = params.max_yaw_rate;
        VelocityCommand::new(rng.gen_range(-b..b), rng.gen_range(-b..b), rng.gen_range(-b..b), rng.gen_range(-w..w))
    };
    let (mut rigid, mut kin) = (QuadState::at_rest(Vec3::new(2.0, 2.0, 1.0), 0.3), QuadState::at_rest(Vec3::zeros(), 0.3));
    let mut quat_err = 0.0f64;
    for _ in 0..5000 {
        let c = cmd(&mut rng);
        rigid = step_tracked(&rigid, &c, &params).unwrap();
        kin = step_kinematic(&kin, &c, &params);
        quat_err = quat_err.max((rigid.q_wb.norm() - 1.0).abs()).max((kin.q_wb.norm() - 1.0).abs());
    }
    let skew_ok = (0..10_000).all(|_| {
        let w = Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let m = skew_omega(&w);
        m == -m.transpose()
    });

    let mut gae_err = 0.0f64;
    for _ in 0..2000 {
        let n = rng.gen_range(1..=10);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let (boot, g, l) = (rng.gen_range(-5.0..5.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..=1.0));
        let (adv, _) = compute_gae(&r, &v, &d, boot, g, l).unwrap();
        for (a, e) in adv.iter().zip(common::gae_by_definition(&r, &v, &d, boot, g, l)) {
            gae_err = gae_err.max((a - e).abs());
        }
    }

    let (grad_err, grad_params) = common::gradient_check(11);
    let (ray_err, ray_class_errors, rays) = common::ray_disagreement(1000, 42);
    let runtime_ok = within(t0, Duration::from_secs(300));

    let pass = quat_err <= 1e-6 && skew_ok && gae_err <= 1e-10 && grad_err <= 1e-3 && ray_class_errors == 0 && ray_err <= 1e-12 && runtime_ok;
    Verdict::new(
        pass,
        format!(
            "quat {quat_err:.1e}, skew exact {skew_ok}, gae {gae_err:.1e}, grad rel {grad_err:.1e}, rays {ray_class_errors} class errors / max gap {ray_err:.1e}"
        ),
    )
    .with(vec![
        format!("quaternion norm drift over 5000 rigid-body and kinematic steps: {quat_err:.3e} (limit 1e-6)"),
        format!("GAE vs definition, 2000 random instances: {gae_err:.3e} (limit 1e-10)"),
        format!("gradient vs central differences, {grad_params} parameters, H=8: {grad_err:.3e} (limit 1e-3)"),
        format!("ray cast vs face-plane oracle: {rays} rays over 1000 scenes, {ray_class_errors} class mismatches, max normalized distance gap {ray_err:.3e}"),
        format!("runtime {:.1} s (limit 300 s)", t0.elapsed().as_secs_f64()),
    ])
}

fn spawning_statistics() -> Verdict {
    let t0 = Instant::now();
    let rows: Vec<(f64, f64)> = [0.0, 0.3, 0.5, 1.0]
        .iter()
        .map(|&e| (e, common::hidden_fraction(e, 100_000, 2024)))
        .collect();
    let worst = rows.iter().map(|(e, f)| (e - f).abs()).fold(0.0, f64::max);
    let pass = worst <= 0.01 && within(t0, Duration::from_secs(60));
    Verdict::new(pass, format!("max |hidden fraction - epsilon| = {worst:.4} over 100k draws each"))
        .with(rows.iter().map(|(e, f)| format!("epsilon {e:.1}: hidden fraction {f:.4}")).collect())
}

fn reward_oracle() -> Verdict {
    let (worst, max_penalty, n) = common::crash_reward_errors(1000, 3);
    let broadcast = (0..50).all(common::broadcast_is_exact);
    let pass = n == 1000 && worst <= 1e-9 && max_penalty <= -3.0 && broadcast;
    Verdict::new(
        pass,
        format!("{n} crashes, max error {worst:.1e}, max r_C {max_penalty:.3}, broadcast exact {broadcast}"),
    )
}

fn curriculum_behavior() -> Verdict {
    let trajectory = |settings: AdaptiveSettings, success: bool, episodes: usize| {
        let mut c = CurriculumState::new(CurriculumMode::Adaptive(settings)).unwrap();
        (0..episodes)
            .map(|_| {
                let e = c.on_episode_begin();
                c.on_episode_end(success);
                e
            })
            .collect::<Vec<f64>>()
    };
    let up = trajectory(AdaptiveSettings::default(), true, 30);
    let steps_ok = up
        .windows(2)
        .all(|w| w[1] - w[0] == 0.0 || (w[1] - w[0] - 0.1).abs() < 1e-12);
    let grid_ok = up.iter().all(|e| (e * 10.0 - (e * 10.0).round()).abs() < 1e-9);
    let distinct: Vec<f64> = up.iter().fold(Vec::new(), |mut acc, &e| {
        if acc.last() != Some(&e) {
            acc.push(e);
        }
        acc
    });
    let reaches_one = *up.last().unwrap() == 1.0 && distinct.len() == 10 && distinct[0] == 0.1;
    let down_from_default = trajectory(AdaptiveSettings::default(), false, 30);
    let down_from_top = trajectory(AdaptiveSettings { epsilon0: 1.0, ..Default::default() }, false, 30);
    let falls = *down_from_default.last().unwrap() == 0.0 && *down_from_top.last().unwrap() == 0.0;
    let in_range = up.iter().chain(&down_from_default).chain(&down_from_top).all(|e| (0.0..=1.0).contains(e));
    Verdict::new(
        steps_ok && grid_ok && reaches_one && falls && in_range,
        format!(
            "success stream: {} levels 0.1..1.0 in +0.1 steps {}; failure stream ends at {} / {}",
            distinct.len(),
            steps_ok && grid_ok,
            down_from_default.last().unwrap(),
            down_from_top.last().unwrap()
        ),
    )
    .with(vec![format!(
        "success-stream epsilon levels: {}",
        distinct.iter().map(|e| format!("{e:.1}")).collect::<Vec<_>>().join(" ")
    )])
}

/// Desk-scale network and optimizer settings shared by the learning checks.
fn desk_config(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        seed,
        envs: 18,
        workers: 1,
        ppo: PpoConfig {
            learning_rate: 2e-3,
            max_steps: steps,
            ..Default::default()
        },
        net: NetConfig {
            encoder_hidden: 32,
            encoder_out: 32,
            trunk: 64,
            hidden: 32,
            ..Default::default()
        },
        stage: StageConfig {
            steps: Some(steps),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Rolling mean of the last `k` defined success rates.
fn rolling(history: &[f64], k: usize) -> Option<f64> {
    let defined: Vec<f64> = history.iter().rev().filter(|v| !v.is_nan()).take(k).copied().collect();
    (defined.len() == k).then(|| defined.iter().sum::<f64>() / k as f64)
}

/// Train until the rolling success rate reaches `threshold` (when
/// `stop_early`) or the budget runs out. Returns the summary and the env
/// steps at which the threshold was first met.
fn train_to_threshold(cfg: &TrainConfig, out: Option<&Path>, threshold: f64, stop_early: bool) -> (TrainSummary, Option<u64>) {
    let mut history = Vec::new();
    let mut hit = None;
    let summary = train(cfg, out, |row: &MetricsRow| {
        history.push(row.success_rate);
        if hit.is_none() && rolling(&history, 3).is_some_and(|r| r >= threshold) {
            hit = Some(row.env_steps);
        }
        !(stop_early && hit.is_some())
    })
    .expect("training runs");
    (summary, hit)
}

fn learning_smoke_test() -> Verdict {
    let mut details = Vec::new();
    let mut passes = 0;
    for seed in 0..3 {
        let mut cfg = desk_config(seed, 2_000_000);
        cfg.obstacle_free = true;
        cfg.stage.curriculum = CurriculumMode::Fixed { epsilon: 0.0 };
        let (summary, hit) = train_to_threshold(&cfg, None, 0.8, true);
        let first = summary.metrics.iter().map(|m| m.success_rate).find(|v| !v.is_nan()).unwrap_or(f64::NAN);
        let ok = first < 0.2 && hit.is_some_and(|s| s <= 2_000_000);
        passes += usize::from(ok);
        details.push(format!(
            "seed {seed}: initial success {first:.3}, rolling success >= 0.8 at {} env steps ({} iterations) -> {}",
            hit.map_or("never".into(), |s| s.to_string()),
            summary.metrics.len(),
            if ok { "ok" } else { "miss" }
        ));
    }
    Verdict::new(passes >= 2, format!("{passes}/3 seeds rose from <20% to >=80% within 2M env steps")).with(details)
}

const STAGE2_THRESHOLD: f64 = 0.6;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn multi_stage(dir: &Path) -> Verdict {
    let mut details = Vec::new();
    let (mut staged, mut direct) = (Vec::new(), Vec::new());
    let stage2_budget = 1_200_000;
    for seed in 0..3 {
        // Stage 1: one drone, default room, adaptive curriculum.
        let s1_dir = dir.join(format!("stage1_seed{seed}"));
        let mut s1 = desk_config(seed, 1_500_000);
        s1.ppo.checkpoints = 1;
        let (s1_sum, _) = train_to_threshold(&s1, Some(&s1_dir), 0.85, true);
        let s1_last = rolling(&s1_sum.metrics.iter().map(|m| m.success_rate).collect::<Vec<_>>(), 3).unwrap_or(f64::NAN);

        // Stage 2 from the stage-1 policy versus from scratch, two drones.
        let mut s2 = desk_config(seed + 100, stage2_budget);
        s2.ppo.checkpoints = 1;
        s2.stage.stage = 2;
        s2.stage.init = Some(s1_dir.join("policy_final.bin"));
        let mut d = s2.clone();
        d.stage.init = None;
        d.stage.direct = true;
        // Seed 0's stage-2 run trains to its full budget; its checkpoint feeds
        // the scalability matrix.
        let s2_out = dir.join(format!("stage2_seed{seed}"));
        let (_, s2_hit) = train_to_threshold(&s2, Some(&s2_out), STAGE2_THRESHOLD, seed != 0);
        let (_, d_hit) = train_to_threshold(&d, None, STAGE2_THRESHOLD, true);
        let as_steps = |h: Option<u64>| h.map_or(f64::INFINITY, |s| s as f64);
        staged.push(as_steps(s2_hit));
        direct.push(as_steps(d_hit));
        details.push(format!(
            "seed {seed}: stage 1 {} env steps (rolling success {s1_last:.2}); env steps to rolling success >= {STAGE2_THRESHOLD}: stage 2 {}, direct {}",
            s1_sum.env_steps,
            s2_hit.map_or("never".into(), |s| s.to_string()),
            d_hit.map_or("never".into(), |s| s.to_string()),
        ));
    }
    let (ms, md) = (median(staged), median(direct));
    Verdict::new(ms < md, format!("median env steps to threshold: stage 2 {ms}, direct {md}")).with(details)
}

fn scalability(dir: &Path) -> Verdict {
    let ckpt = dir.join("stage2_seed0").join("policy_final.bin");
    let params: PolicyParams = match load_checkpoint(&ckpt, None) {
        Ok((p, _)) => p,
        Err(e) => return Verdict::new(false, format!("no stage-2 checkpoint ({e}); criterion 6 must run first")),
    };
    let controller = Controller::Network {
        params: &params,
        deterministic: false,
    };
    let rooms: Vec<WorldConfig> = WorldConfig::BUILTIN.iter().map(|r| WorldConfig::builtin(r).unwrap()).collect();
    let mut by_seed: Vec<Vec<EvalReport>> = Vec::new();
    for seed in 0..3 {
        let s = EvalSettings {
            episodes: 200,
            epsilon: 0.3,
            seed,
            workers: 1,
        };
        by_seed.push(eval::sweep(&controller, &rooms, &[1, 2, 3], &s).unwrap());
    }
    let complete = by_seed.iter().all(|r| r.len() == 9);
    let mut details = vec![format!("{:<9} {:>3} {:>24}", "room", "N", "success per eval seed")];
    for cell in 0..9 {
        let r = &by_seed[0][cell];
        let rates: Vec<String> = by_seed.iter().map(|s| format!("{:.3}", s[cell].success_rate)).collect();
        details.push(format!("{:<9} {:>3} {:>24}", r.room, r.agents, rates.join(" ")));
    }
    let rate = |room: &str, n: usize| {
        median(
            by_seed
                .iter()
                .map(|s| s.iter().find(|r| r.room == room && r.agents == n).unwrap().success_rate)
                .collect(),
        )
    };
    let (one, two) = (rate("8x8x3", 1), rate("8x8x3", 2));
    let trend = two >= one;
    if !trend {
        details.push(format!("FLAG: 8x8x3 median success N=2 {two:.3} < N=1 {one:.3} (soft criterion)"));
    }
    // Soft criterion: a missing trend is flagged, not failed.
    Verdict::new(
        complete,
        format!("9-cell matrix complete {complete}; 8x8x3 median success N=1 {one:.3}, N=2 {two:.3}{}", if trend { "" } else { " [FLAG]" }),
    )
    .with(details)
}

fn determinism() -> Verdict {
    let mut cfg = desk_config(5, 1_000_000);
    cfg.max_iterations = Some(10);
    cfg.ppo.buffer_size = 2048;
    cfg.ppo.batch_size = 512;
    let run = |c: &TrainConfig| {
        let s = train(c, None, |_| true).unwrap();
        let rows: Vec<Vec<String>> = s.metrics.iter().map(|m| m.to_record()).collect();
        (rows, s.params)
    };
    let (rows_a, params) = run(&cfg);
    let (rows_b, params_b) = run(&cfg);
    let train_ok = rows_a.len() == 10
        && rows_a == rows_b
        && params.data.iter().zip(&params_b.data).all(|(a, b)| a.to_bits() == b.to_bits());

    let controller = Controller::Network {
        params: &params,
        deterministic: false,
    };
    let world = WorldConfig::default_room().with_agents(2);
    let s = |workers| EvalSettings {
        episodes: 24,
        epsilon: 0.3,
        seed: 9,
        workers,
    };
    let reports: Vec<EvalReport> = [1, 3].iter().map(|&w| eval::evaluate(&controller, &world, &s(w)).unwrap()).collect();
    let eval_ok = reports[0] == reports[1];
    Verdict::new(
        train_ok && eval_ok,
        format!("10 training iterations bit-identical {train_ok}; eval report identical at 1 and 3 workers {eval_ok}"),
    )
}

fn throughput() -> Verdict {
    let world = WorldConfig::default_room().with_agents(1);
    let mut envs: Vec<Environment> = (0..18).map(|s| Environment::new(world.clone(), s).unwrap()).collect();
    for e in envs.iter_mut() {
        e.reset(0.3).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let commands: Vec<VelocityCommand> = (0..4096)
        .map(|_| VelocityCommand::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)))
        .collect();
    let t0 = Instant::now();
    let mut steps = 0usize;
    let mut k = 0;
    while t0.elapsed() < Duration::from_secs(3) {
        for e in envs.iter_mut() {
            if e.is_done() {
                e.reset(0.3).unwrap();
            }
            e.step(std::slice::from_ref(&commands[k % commands.len()])).unwrap();
            k += 1;
            steps += 1;
        }
    }
    let rate = steps as f64 / t0.elapsed().as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    Verdict::new(
        rate >= 50_000.0,
        format!("{rate:.0} env steps/s across 18 kinematic instances ({cores} core(s), single thread)"),
    )
}

//! Fixtures shared by the benchmarks.

use cts_core::dynamics::VelocityCommand;
use cts_core::env::Environment;
use cts_core::policy::ActionBounds;
use cts_core::world::WorldConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `count` freshly reset environments on `world`, seeds `0..count`.
pub fn environments(world: &WorldConfig, count: usize, epsilon: f64) -> Vec<Environment> {
    (0..count as u64)
        .map(|s| {
            let mut env = Environment::new(world.clone(), s).expect("valid world");
            env.reset(epsilon).expect("spawn succeeds");
            env
        })
        .collect()
}

/// Uniform commands inside the action bounds, drawn ahead of time so the
/// benchmark measures the simulator rather than the RNG.
pub struct CommandTape {
    commands: Vec<VelocityCommand>,
    next: usize,
}

impl CommandTape {
    pub fn new(world: &WorldConfig, len: usize, seed: u64) -> Self {
        let b = ActionBounds::from_params(&world.dynamics).0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let commands = (0..len)
            .map(|_| VelocityCommand::from_array(std::array::from_fn(|j| rng.gen_range(-b[j]..=b[j]))))
            .collect();
        Self { commands, next: 0 }
    }

    pub fn take(&mut self, n: usize) -> &[VelocityCommand] {
        if self.next + n > self.commands.len() {
            self.next = 0;
        }
        let s = &self.commands[self.next..self.next + n];
        self.next += n;
        s
    }
}

/// Advance every environment one step, resetting finished episodes.
/// Returns the number of env steps taken.
pub fn step_all(envs: &mut [Environment], tape: &mut CommandTape, epsilon: f64) -> usize {
    for env in envs.iter_mut() {
        if env.is_done() {
            env.reset(epsilon).expect("spawn succeeds");
        }
        let n = env.num_agents();
        env.step(tape.take(n)).expect("step succeeds");
    }
    envs.len()
}

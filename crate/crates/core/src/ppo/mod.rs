//! Clipped-surrogate PPO over recurrent multi-agent rollouts.

mod gae;
mod rollout;
mod train;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gae::{compute_gae, compute_gae_brute_force};
pub use rollout::{collect_rollouts, EnvPool, EpisodeStats, Rollout, RolloutBuffer, Trajectory, Transition};
pub use train::{train, MetricsRow, StageConfig, TrainConfig, TrainSummary, WorldRef, METRICS_HEADER};
pub use update::{clip_grad_norm, ppo_update, Adam, UpdateStats};

/// PPO hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// Transitions per minibatch.
    pub batch_size: usize,
    /// Transitions collected per iteration.
    pub buffer_size: usize,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over the step budget.
    pub linear_schedule: bool,
    pub entropy_coef: f64,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub max_steps: u64,
    pub checkpoints: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Truncated-BPTT window.
    pub sequence_length: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            buffer_size: 10240,
            learning_rate: 3e-4,
            linear_schedule: true,
            entropy_coef: 0.01,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 3,
            max_steps: 12_000_000,
            checkpoints: 10,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            sequence_length: 64,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.buffer_size == 0 || self.buffer_size % self.batch_size != 0 {
            return fail(format!(
                "buffer_size ({}) must be a positive multiple of batch_size ({})",
                self.buffer_size, self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.clip > 0.0) {
            return fail(format!("clip epsilon must be > 0, got {}", self.clip));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("invalid learning rate {}", self.learning_rate));
        }
        if self.epochs == 0 || self.sequence_length == 0 {
            return fail("epochs and sequence_length must be >= 1".into());
        }
        if !(self.max_grad_norm > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return fail("max_grad_norm must be > 0; loss coefficients >= 0".into());
        }
        Ok(())
    }

    /// Learning rate after `done` of `budget` environment steps.
    pub fn learning_rate_at(&self, done: u64, budget: u64) -> f64 {
        if !self.linear_schedule || budget == 0 {
            return self.learning_rate;
        }
        let frac = 1.0 - (done as f64 / budget as f64);
        self.learning_rate * frac.max(0.0)
    }
}

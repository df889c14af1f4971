//! Two-stage training: a single-agent stage, then a multi-agent stage
//! initialized from it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rollout::{collect_rollouts, EnvPool};
use super::update::{ppo_update, Adam};
use super::PpoConfig;
use crate::curriculum::{CurriculumMode, CurriculumState};
use crate::error::{Error, Result};
use crate::policy::{load_checkpoint, save_checkpoint, NetConfig, PolicyParams};
use crate::rng::seeded;
use crate::world::WorldConfig;

/// Default stage-1 budget; stage 2 gets the rest of `max_steps`.
pub const STAGE1_STEPS: u64 = 3_000_000;

/// Column names of the metrics CSV.
pub const METRICS_HEADER: [&str; 13] = [
    "iteration",
    "env_steps",
    "mean_cumulative_reward",
    "success_rate",
    "mean_episode_length",
    "epsilon",
    "policy_loss",
    "value_loss",
    "entropy",
    "lr",
    "episodes",
    "approx_kl",
    "clip_fraction",
];

/// A builtin room name, a layout path, or an inline layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldRef {
    Named(String),
    Inline(Box<WorldConfig>),
}

impl Default for WorldRef {
    fn default() -> Self {
        WorldRef::Named("5x5x3".into())
    }
}

impl WorldRef {
    pub fn resolve(&self) -> Result<WorldConfig> {
        match self {
            WorldRef::Named(s) => WorldConfig::resolve(s),
            WorldRef::Inline(w) => {
                w.validate()?;
                Ok((**w).clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// 1 (single agent) or 2 (team).
    pub stage: u8,
    /// Defaults to 1 in stage 1 and 2 in stage 2.
    pub agents: Option<usize>,
    /// Checkpoint to start from; required in stage 2 unless `direct`.
    pub init: Option<PathBuf>,
    /// Stage 2 from random weights.
    pub direct: bool,
    pub curriculum: CurriculumMode,
    /// Environment-step budget; defaults to the stage's share of
    /// `max_steps`.
    pub steps: Option<u64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            agents: None,
            init: None,
            direct: false,
            curriculum: CurriculumMode::default(),
            steps: None,
        }
    }
}

impl StageConfig {
    pub fn agents(&self) -> usize {
        self.agents.unwrap_or(if self.stage == 1 { 1 } else { 2 })
    }

    pub fn budget(&self, ppo: &PpoConfig) -> u64 {
        self.steps.unwrap_or(match self.stage {
            1 => STAGE1_STEPS.min(ppo.max_steps),
            _ => ppo.max_steps.saturating_sub(STAGE1_STEPS),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.stage == 2 && self.init.is_none() && !self.direct {
            return Err(Error::Config(
                "stage 2 needs an init checkpoint (--init) or the direct ablation (--direct)".into(),
            ));
        }
        if self.direct && self.init.is_some() {
            return Err(Error::Config("direct mode trains from scratch; drop the init checkpoint".into()));
        }
        if self.agents() == 0 {
            return Err(Error::Config("agent count must be >= 1".into()));
        }
        CurriculumState::new(self.curriculum).map(|_| ())
    }
}

/// Everything a training run needs; loadable from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Parallel environment copies.
    pub envs: usize,
    /// Threads stepping environments; results do not depend on it.
    pub workers: usize,
    pub world: WorldRef,
    /// Remove all furniture from the layout.
    pub obstacle_free: bool,
    /// Override the layout's episode length.
    pub t_max: Option<usize>,
    /// Stop after this many iterations even if budget remains.
    pub max_iterations: Option<usize>,
    pub ppo: PpoConfig,
    pub net: NetConfig,
    pub stage: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            envs: 18,
            workers: 1,
            world: WorldRef::default(),
            obstacle_free: false,
            t_max: None,
            max_iterations: None,
            ppo: PpoConfig::default(),
            net: NetConfig::default(),
            stage: StageConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    /// The layout after overrides.
    pub fn world_config(&self) -> Result<WorldConfig> {
        let mut w = self.world.resolve()?;
        if self.obstacle_free {
            w = w.without_obstacles();
        }
        if let Some(t) = self.t_max {
            w.t_max = t;
        }
        w = w.with_agents(self.stage.agents());
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<WorldConfig> {
        self.ppo.validate()?;
        self.net.validate()?;
        self.stage.validate()?;
        if self.envs == 0 || self.workers == 0 {
            return Err(Error::Config("envs and workers must be >= 1".into()));
        }
        let w = self.world_config()?;
        if w.sensor.num_rays() != self.net.num_rays {
            return Err(Error::Config(format!(
                "network expects {} rays but the sensor casts {}",
                self.net.num_rays,
                w.sensor.num_rays()
            )));
        }
        Ok(w)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_cumulative_reward: f64,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub epsilon: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub lr: f64,
    pub episodes: usize,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl MetricsRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.env_steps.to_string(),
            self.mean_cumulative_reward.to_string(),
            self.success_rate.to_string(),
            self.mean_episode_length.to_string(),
            self.epsilon.to_string(),
            self.policy_loss.to_string(),
            self.value_loss.to_string(),
            self.entropy.to_string(),
            self.lr.to_string(),
            self.episodes.to_string(),
            self.approx_kl.to_string(),
            self.clip_fraction.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<MetricsRow>,
    pub initial_params: PolicyParams,
    pub params: PolicyParams,
    pub env_steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub curriculum: CurriculumState,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Run one training stage.
///
/// With `out_dir` set, writes `config.toml`, `metrics.csv`, `policy_init.bin`,
/// evenly spaced checkpoints and `policy_final.bin`. `on_iteration` sees
/// every metrics row as it is produced; returning `false` ends the run early.
pub fn train(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_iteration: impl FnMut(&MetricsRow) -> bool,
) -> Result<TrainSummary> {
    let world = cfg.validate()?;
    let budget = cfg.stage.budget(&cfg.ppo);

    let mut params = match &cfg.stage.init {
        Some(path) if !cfg.stage.direct => load_checkpoint(path, Some(&cfg.net))?.0,
        _ => PolicyParams::init(cfg.net, cfg.seed)?,
    };
    let initial_params = params.clone();
    let mut curriculum = CurriculumState::new(cfg.stage.curriculum)?;
    let mut pool = EnvPool::new(&world, cfg.envs, cfg.seed, cfg.net.hidden, cfg.workers)?;
    let mut adam = Adam::new(params.data.len());
    let mut rng = seeded(cfg.seed, 0xada);
    let bounds = pool.bounds();

    let meta = |steps: u64| {
        serde_json::json!({
            "stage": cfg.stage.stage,
            "env_steps": steps,
            "seed": cfg.seed,
            "config": serde_json::to_value(cfg).unwrap_or_default(),
        })
    };
    let mut metrics_file = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join("config.toml");
        fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
        save_checkpoint(&dir.join("policy_init.bin"), &params, meta(0))?;
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        w.write_record(METRICS_HEADER)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        metrics_file = Some((w, path));
    }

    let mut env_steps = 0u64;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut next_ckpt = 1;
    let mut iteration = 0;
    while env_steps < budget && cfg.max_iterations.map_or(true, |m| iteration < m) {
        let lr = cfg.ppo.learning_rate_at(env_steps, budget);
        let rollout = collect_rollouts(&mut pool, &params, &mut curriculum, cfg.ppo.buffer_size)?;
        env_steps += rollout.env_steps;
        let stats = ppo_update(&rollout.buffer, &mut params, &mut adam, &cfg.ppo, lr, bounds, &mut rng)?;
        let eps = &rollout.episodes;
        let row = MetricsRow {
            iteration,
            env_steps,
            mean_cumulative_reward: mean(eps.iter().map(|e| e.reward)),
            success_rate: mean(eps.iter().map(|e| if e.success { 1.0 } else { 0.0 })),
            mean_episode_length: mean(eps.iter().map(|e| e.length as f64)),
            epsilon: curriculum.epsilon,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            lr,
            episodes: eps.len(),
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
        };
        let keep_going = on_iteration(&row);
        if let Some((w, path)) = metrics_file.as_mut() {
            w.write_record(row.to_record())
                .and_then(|_| w.flush().map_err(Into::into))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        }
        metrics.push(row);
        if let Some(dir) = out_dir {
            let count = cfg.ppo.checkpoints as u64;
            while next_ckpt <= count && env_steps * count >= budget * next_ckpt {
                let path = dir.join(format!("checkpoint_{next_ckpt:02}.bin"));
                save_checkpoint(&path, &params, meta(env_steps))?;
                checkpoints.push(path);
                next_ckpt += 1;
            }
        }
        iteration += 1;
        if !keep_going {
            break;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("policy_final.bin"), &params, meta(env_steps))?;
        let mut log = fs::File::create(dir.join("curriculum.json")).map_err(|e| Error::io(dir, e))?;
        let text = serde_json::to_string_pretty(&curriculum).map_err(|e| Error::Checkpoint(e.to_string()))?;
        log.write_all(text.as_bytes()).map_err(|e| Error::io(dir, e))?;
    }
    Ok(TrainSummary {
        metrics,
        initial_params,
        params,
        env_steps,
        checkpoints,
        curriculum,
    })
}

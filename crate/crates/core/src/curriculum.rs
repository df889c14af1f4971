//! Adaptive embedded curriculum over the spawning threshold `epsilon`.
//!
//! At every episode begin the running success rate is compared against a low
//! and a high boundary; `epsilon` moves down or up by a fixed step and is
//! clamped to `[0, 1]`. At every episode end a success is counted when a drone
//! reached the target.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid `epsilon` is snapped to after each update, so repeated `+ delta`
/// lands on exact multiples.
const EPSILON_GRID: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    ((x / EPSILON_GRID).round() * EPSILON_GRID).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveSettings {
    pub epsilon0: f64,
    pub delta: f64,
    pub sr_low: f64,
    pub sr_high: f64,
    /// Success rate over the last `window` finished episodes instead of the
    /// whole run.
    pub window: Option<usize>,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        Self {
            epsilon0: 0.1,
            delta: 0.1,
            sr_low: 0.2,
            sr_high: 0.9,
            window: None,
        }
    }
}

/// How `epsilon` evolves during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CurriculumMode {
    Adaptive(AdaptiveSettings),
    /// Constant threshold, no adaptation.
    Fixed { epsilon: f64 },
}

impl Default for CurriculumMode {
    fn default() -> Self {
        CurriculumMode::Adaptive(AdaptiveSettings::default())
    }
}

/// Curriculum bookkeeping: threshold plus success counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub epsilon: f64,
    pub delta: f64,
    pub sr_low: f64,
    pub sr_high: f64,
    pub success_count: u64,
    pub episode_count: u64,
    pub success_rate: f64,
    pub window: Option<usize>,
    recent: VecDeque<bool>,
    adaptive: bool,
}

impl CurriculumState {
    pub fn new(mode: CurriculumMode) -> Result<Self> {
        match mode {
            CurriculumMode::Adaptive(s) => Self::adaptive(s),
            CurriculumMode::Fixed { epsilon } => Self::fixed(epsilon),
        }
    }

    pub fn adaptive(s: AdaptiveSettings) -> Result<Self> {
        if !(0.0..=1.0).contains(&s.epsilon0) {
            return Err(Error::Config(format!("epsilon0 must lie in [0, 1], got {}", s.epsilon0)));
        }
        if !(s.delta >= 0.0 && s.delta <= 1.0) {
            return Err(Error::Config(format!("curriculum delta must lie in [0, 1], got {}", s.delta)));
        }
        if !(0.0 <= s.sr_low && s.sr_low < s.sr_high && s.sr_high <= 1.0) {
            return Err(Error::Config(format!(
                "success-rate bounds must satisfy 0 <= sr_low < sr_high <= 1, got {} and {}",
                s.sr_low, s.sr_high
            )));
        }
        if s.window == Some(0) {
            return Err(Error::Config("curriculum window must be >= 1".into()));
        }
        Ok(Self {
            epsilon: s.epsilon0,
            delta: s.delta,
            sr_low: s.sr_low,
            sr_high: s.sr_high,
            success_count: 0,
            episode_count: 0,
            success_rate: 0.0,
            window: s.window,
            recent: VecDeque::new(),
            adaptive: true,
        })
    }

    pub fn fixed(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("fixed epsilon must lie in [0, 1], got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            delta: 0.0,
            sr_low: 0.0,
            sr_high: 1.0,
            success_count: 0,
            episode_count: 0,
            success_rate: 0.0,
            window: None,
            recent: VecDeque::new(),
            adaptive: false,
        })
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    /// Update the success rate and threshold for a new episode; returns the
    /// threshold the episode should spawn with.
    ///
    /// The threshold only moves once at least one episode has been counted:
    /// before that the success rate carries no information.
    pub fn on_episode_begin(&mut self) -> f64 {
        if self.episode_count != 0 {
            self.success_rate = match self.window {
                Some(_) if !self.recent.is_empty() => {
                    self.recent.iter().filter(|s| **s).count() as f64 / self.recent.len() as f64
                }
                Some(_) => 0.0,
                None => self.success_count as f64 / self.episode_count as f64,
            };
            if self.adaptive {
                if self.success_rate > self.sr_high {
                    self.epsilon = snap((self.epsilon + self.delta).min(1.0));
                }
                if self.success_rate < self.sr_low {
                    self.epsilon = snap((self.epsilon - self.delta).max(0.0));
                }
            }
        }
        self.episode_count += 1;
        self.epsilon
    }

    /// Record the outcome of a finished episode.
    pub fn on_episode_end(&mut self, success: bool) {
        if success {
            self.success_count += 1;
        }
        if let Some(w) = self.window {
            self.recent.push_back(success);
            while self.recent.len() > w {
                self.recent.pop_front();
            }
        }
    }
}

//! The optimization phase: GAE, sequence chunking, minibatch packing, Adam.

use rand::seq::SliceRandom;
use rand::Rng;

use super::gae::compute_gae;
use super::rollout::RolloutBuffer;
use super::PpoConfig;
use crate::error::{Error, Result};
use crate::policy::{ActionBounds, LossConfig, PolicyParams, SequenceBatch};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1 = 1.0 - self.beta1.powi(self.t as i32);
        let b2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / b1) / ((*v / b2).sqrt() + self.eps);
        }
    }
}

/// Scale `grad` down to at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Averages over all minibatches of an update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    traj: usize,
    start: usize,
    len: usize,
}

fn pack(
    chunks: &mut [Chunk],
    buffer: &RolloutBuffer,
    adv: &[Vec<f64>],
    ret: &[Vec<f64>],
) -> SequenceBatch {
    chunks.sort_by_key(|c| std::cmp::Reverse(c.len));
    let longest = chunks[0].len;
    let mut b = SequenceBatch::default();
    for t in 0..longest {
        let mut alive = 0;
        for ch in chunks.iter().take_while(|ch| ch.len > t) {
            let s = &buffer.trajectories[ch.traj].steps[ch.start + t];
            b.obs.extend_from_slice(&s.obs);
            b.raw_actions.extend_from_slice(&s.raw_action);
            b.old_log_probs.push(s.log_prob);
            b.advantages.push(adv[ch.traj][ch.start + t]);
            b.returns.push(ret[ch.traj][ch.start + t]);
            alive += 1;
        }
        b.steps_per_time.push(alive);
    }
    for ch in chunks.iter() {
        let s = &buffer.trajectories[ch.traj].steps[ch.start];
        b.h0.extend_from_slice(&s.h);
        b.c0.extend_from_slice(&s.c);
    }
    b
}

/// Optimize `params` on one on-policy buffer.
///
/// Each trajectory is cut into windows of `sequence_length` steps replayed
/// from their recorded recurrent state. Windows are shuffled each epoch and
/// grouped into minibatches of roughly `batch_size` transitions.
pub fn ppo_update(
    buffer: &RolloutBuffer,
    params: &mut PolicyParams,
    adam: &mut Adam,
    cfg: &PpoConfig,
    lr: f64,
    bounds: ActionBounds,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    if buffer.is_empty() {
        return Err(Error::EmptyInput("rollout buffer".into()));
    }
    let mut adv = Vec::with_capacity(buffer.trajectories.len());
    let mut ret = Vec::with_capacity(buffer.trajectories.len());
    let mut chunks = Vec::new();
    for (k, t) in buffer.trajectories.iter().enumerate() {
        let r: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = t.steps.iter().map(|s| s.value).collect();
        let mut d = vec![false; r.len()];
        *d.last_mut().expect("non-empty trajectory") = t.terminal;
        let boot = if t.terminal { 0.0 } else { t.bootstrap };
        let (a, g) = compute_gae(&r, &v, &d, boot, cfg.gamma, cfg.lambda)?;
        adv.push(a);
        ret.push(g);
        let mut start = 0;
        while start < t.steps.len() {
            let len = cfg.sequence_length.min(t.steps.len() - start);
            chunks.push(Chunk { traj: k, start, len });
            start += len;
        }
    }

    let loss_cfg = LossConfig {
        clip: cfg.clip,
        value_coef: cfg.value_coef,
        entropy_coef: cfg.entropy_coef,
        normalize_advantages: cfg.normalize_advantages,
        bounds,
    };
    let mut grad = vec![0.0; params.data.len()];
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        chunks.shuffle(rng);
        let mut i = 0;
        while i < chunks.len() {
            let mut j = i;
            let mut rows = 0;
            while j < chunks.len() && rows < cfg.batch_size {
                rows += chunks[j].len;
                j += 1;
            }
            let mut mb = chunks[i..j].to_vec();
            i = j;
            let batch = pack(&mut mb, buffer, &adv, &ret);
            let s = params.loss_and_grad(&batch, &loss_cfg, &mut grad)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss(format!("non-finite gradient; loss stats {s:?}")));
            }
            let norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            adam.step(&mut params.data, &grad, lr);
            stats.policy_loss += s.policy;
            stats.value_loss += s.value;
            stats.entropy += s.entropy;
            stats.approx_kl += s.approx_kl;
            stats.clip_fraction += s.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.approx_kl /= m;
    stats.clip_fraction /= m;
    stats.grad_norm /= m;
    if !params.is_finite() {
        return Err(Error::NonFiniteLoss("parameters became non-finite".into()));
    }
    Ok(stats)
}

//! Shared recurrent actor-critic.
//!
//! Ray features pass through a two-layer leaky-ReLU encoder, are concatenated
//! with the non-visual observation entries, go through two sigmoid layers and
//! an LSTM cell; a linear head gives the Gaussian action mean, another the
//! state value. The log standard deviation is a free parameter vector.
//!
//! All parameters live in one flat `f64` vector addressed through
//! [`Layout`], which keeps optimizer steps, gradient clipping, checkpointing
//! and finite-difference checks uniform.

mod checkpoint;
mod linalg;
mod network;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadParams, VelocityCommand};
use crate::env::{observation_len, RAY_FEATURES};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use network::{LossConfig, LossStats, SequenceBatch, StepOutput};

pub const ACTION_DIM: usize = 4;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub num_rays: usize,
    pub encoder_hidden: usize,
    pub encoder_out: usize,
    pub trunk: usize,
    pub hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_rays: 36,
            encoder_hidden: 128,
            encoder_out: 128,
            trunk: 512,
            hidden: 128,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        observation_len(self.num_rays)
    }

    pub fn ray_dim(&self) -> usize {
        RAY_FEATURES * self.num_rays
    }

    pub fn validate(&self) -> Result<()> {
        if [self.num_rays, self.encoder_hidden, self.encoder_out, self.trunk, self.hidden].contains(&0) {
            return Err(Error::Config(format!("network sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    Enc1W,
    Enc1B,
    Enc2W,
    Enc2B,
    Fc1W,
    Fc1B,
    Fc2W,
    Fc2B,
    LstmWx,
    LstmWh,
    LstmB,
    MeanW,
    MeanB,
    ValueW,
    ValueB,
    LogStd,
}

impl Tensor {
    pub const ALL: [Tensor; 16] = [
        Tensor::Enc1W,
        Tensor::Enc1B,
        Tensor::Enc2W,
        Tensor::Enc2B,
        Tensor::Fc1W,
        Tensor::Fc1B,
        Tensor::Fc2W,
        Tensor::Fc2B,
        Tensor::LstmWx,
        Tensor::LstmWh,
        Tensor::LstmB,
        Tensor::MeanW,
        Tensor::MeanB,
        Tensor::ValueW,
        Tensor::ValueB,
        Tensor::LogStd,
    ];
}

/// Offsets and shapes of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: [usize; 16],
    shapes: [(usize, usize); 16],
    total: usize,
}

impl Layout {
    pub fn new(c: &NetConfig) -> Self {
        let z = c.encoder_out + (c.input_dim() - c.ray_dim());
        let shapes = [
            (c.encoder_hidden, c.ray_dim()),
            (c.encoder_hidden, 1),
            (c.encoder_out, c.encoder_hidden),
            (c.encoder_out, 1),
            (c.trunk, z),
            (c.trunk, 1),
            (c.trunk, c.trunk),
            (c.trunk, 1),
            (4 * c.hidden, c.trunk),
            (4 * c.hidden, c.hidden),
            (4 * c.hidden, 1),
            (ACTION_DIM, c.hidden),
            (ACTION_DIM, 1),
            (1, c.hidden),
            (1, 1),
            (ACTION_DIM, 1),
        ];
        let mut offsets = [0; 16];
        let mut total = 0;
        for (o, (r, k)) in offsets.iter_mut().zip(shapes.iter()) {
            *o = total;
            total += r * k;
        }
        Self { offsets, shapes, total }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.shapes[t as usize]
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        let (r, c) = self.shapes[i];
        self.offsets[i]..self.offsets[i] + r * c
    }
}

/// Network weights shared by every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: NetConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

impl PolicyParams {
    pub fn zeros(config: NetConfig) -> Self {
        let layout = Layout::new(&config);
        Self {
            config,
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Orthogonal weights (gain sqrt(2) in the encoder, 1 in trunk and LSTM),
    /// small-gain heads, zero biases except a unit LSTM forget bias.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = seeded(seed, 0x1417);
        let gains = [
            (Tensor::Enc1W, 2f64.sqrt()),
            (Tensor::Enc2W, 2f64.sqrt()),
            (Tensor::Fc1W, 1.0),
            (Tensor::Fc2W, 1.0),
            (Tensor::LstmWx, 1.0),
            (Tensor::LstmWh, 1.0),
            (Tensor::MeanW, 0.01),
            (Tensor::ValueW, 1.0),
        ];
        for (t, gain) in gains {
            let (r, c) = p.layout.shape(t);
            let w = orthogonal(r, c, gain, &mut rng);
            p.tensor_mut(t).copy_from_slice(&w);
        }
        let h = config.hidden;
        p.tensor_mut(Tensor::LstmB)[h..2 * h].fill(1.0);
        Ok(p)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.layout.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamped log standard deviation.
    pub fn log_std(&self) -> [f64; ACTION_DIM] {
        let s = self.tensor(Tensor::LogStd);
        std::array::from_fn(|j| s[j].clamp(LOG_STD_MIN, LOG_STD_MAX))
    }
}

/// LSTM hidden and cell vectors of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Per-dimension magnitude limits of the squashed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds(pub [f64; ACTION_DIM]);

impl ActionBounds {
    pub fn from_params(p: &QuadParams) -> Self {
        Self([p.max_velocity, p.max_velocity, p.max_velocity, p.max_yaw_rate])
    }
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self::from_params(&QuadParams::default())
    }
}

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u.abs() - (-2.0 * u.abs()).exp().ln_1p())
}

/// Diagonal Gaussian over pre-squash actions; commands are
/// `bound * tanh(u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub mean: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
    pub bounds: ActionBounds,
}

/// A drawn action: the pre-squash sample, the command it maps to, and its
/// log density in command space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    pub raw: [f64; ACTION_DIM],
    pub command: VelocityCommand,
    pub log_prob: f64,
}

impl ActionDistribution {
    pub fn new(mean: [f64; ACTION_DIM], log_std: [f64; ACTION_DIM], bounds: ActionBounds) -> Self {
        let log_std = log_std.map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Self { mean, log_std, bounds }
    }

    /// Gaussian log density of `raw` (no squash term).
    pub fn gaussian_log_prob(&self, raw: &[f64; ACTION_DIM]) -> f64 {
        (0..ACTION_DIM)
            .map(|j| {
                let z = (raw[j] - self.mean[j]) * (-self.log_std[j]).exp();
                -0.5 * z * z - self.log_std[j] - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Log density of the squashed, scaled command produced from `raw`.
    pub fn log_prob(&self, raw: &[f64; ACTION_DIM]) -> f64 {
        self.gaussian_log_prob(raw) - squash_correction(raw, &self.bounds)
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| 0.5 + 0.5 * LN_2PI + s).sum()
    }

    pub fn command(&self, raw: &[f64; ACTION_DIM]) -> VelocityCommand {
        VelocityCommand::from_array(std::array::from_fn(|j| self.bounds.0[j] * raw[j].tanh()))
    }
}

/// `sum_j ln(bound_j * (1 - tanh(u_j)^2))`.
pub fn squash_correction(raw: &[f64; ACTION_DIM], bounds: &ActionBounds) -> f64 {
    (0..ACTION_DIM)
        .map(|j| bounds.0[j].ln() + log_one_minus_tanh_sq(raw[j]))
        .sum()
}

/// Draw an action, or take the squashed mean when `deterministic`.
pub fn sample_action(dist: &ActionDistribution, rng: &mut impl Rng, deterministic: bool) -> SampledAction {
    let raw: [f64; ACTION_DIM] = if deterministic {
        dist.mean
    } else {
        std::array::from_fn(|j| {
            let z: f64 = rng.sample(StandardNormal);
            dist.mean[j] + dist.log_std[j].exp() * z
        })
    };
    SampledAction {
        raw,
        command: dist.command(&raw),
        log_prob: dist.log_prob(&raw),
    }
}

/// Single-agent forward pass: action distribution, value and next state.
pub fn forward(
    obs: &[f64],
    rec: &RecurrentState,
    params: &PolicyParams,
    bounds: ActionBounds,
) -> Result<(ActionDistribution, f64, RecurrentState)> {
    if !params.is_finite() {
        return Err(Error::NonFinite("policy parameters"));
    }
    let mut h = rec.h.clone();
    let mut c = rec.c.clone();
    let out = params.forward_batch(obs, 1, &mut h, &mut c)?;
    let dist = ActionDistribution::new(
        std::array::from_fn(|j| out.mean[j]),
        params.log_std(),
        bounds,
    );
    Ok((dist, out.value[0], RecurrentState { h, c }))
}

/// Encoder output (embedding) for one observation.
pub fn encode(obs: &[f64], params: &PolicyParams) -> Result<Vec<f64>> {
    params.encode_batch(obs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> NetConfig {
        NetConfig {
            num_rays: 2,
            encoder_hidden: 5,
            encoder_out: 4,
            trunk: 6,
            hidden: 8,
        }
    }

    fn obs_for(c: &NetConfig, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed, 1);
        (0..c.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::new(&NetConfig::default());
        let mut end = 0;
        for t in Tensor::ALL {
            let r = l.range(t);
            assert_eq!(r.start, end);
            end = r.end;
        }
        assert_eq!(end, l.len());
        assert_eq!(l.shape(Tensor::Fc1W), (512, 128 + 17));
    }

    #[test]
    fn orthogonal_rows_or_columns() {
        let mut rng = seeded(0, 0);
        let (r, c) = (6, 4);
        let w = orthogonal(r, c, 1.0, &mut rng);
        for a in 0..c {
            for b in 0..c {
                let d: f64 = (0..r).map(|i| w[i * c + a] * w[i * c + b]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let c = tiny();
        let p = PolicyParams::zeros(c);
        let (dist, v, _) = forward(&obs_for(&c, 0), &RecurrentState::zeros(8), &p, ActionBounds::default()).unwrap();
        assert_eq!(dist.mean, [0.0; 4]);
        assert_eq!(v, 0.0);
        assert_eq!(dist.log_std, [0.0; 4]);
        assert!(encode(&obs_for(&c, 0), &p).unwrap().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn forward_is_pure_and_memory_matters() {
        let c = tiny();
        let p = PolicyParams::init(c, 3).unwrap();
        let obs = obs_for(&c, 1);
        let rec = RecurrentState::zeros(8);
        let a = forward(&obs, &rec, &p, ActionBounds::default()).unwrap();
        let b = forward(&obs, &rec, &p, ActionBounds::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let mut other = rec.clone();
        other.h[3] = 0.9;
        let d = forward(&obs, &other, &p, ActionBounds::default()).unwrap();
        assert_ne!(a.1, d.1);
        assert_ne!(a.0.mean, d.0.mean);
        assert_ne!(a.2, rec);
    }

    #[test]
    fn batch_rows_match_single_passes() {
        let c = tiny();
        let p = PolicyParams::init(c, 4).unwrap();
        let obs = obs_for(&c, 2);
        let mut batch = obs.clone();
        batch.extend_from_slice(&obs);
        batch.extend_from_slice(&obs);
        let mut h = vec![0.1; 3 * 8];
        let mut cc = vec![-0.2; 3 * 8];
        let out = p.forward_batch(&batch, 3, &mut h, &mut cc).unwrap();
        for r in 1..3 {
            assert_eq!(out.mean[..4], out.mean[4 * r..4 * r + 4]);
            assert_eq!(out.value[0], out.value[r]);
            assert_eq!(h[..8], h[8 * r..8 * r + 8]);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let c = tiny();
        let mut p = PolicyParams::init(c, 5).unwrap();
        let rec = RecurrentState::zeros(8);
        assert!(forward(&[0.0; 3], &rec, &p, ActionBounds::default()).is_err());
        p.data[0] = f64::NAN;
        assert!(forward(&obs_for(&c, 0), &rec, &p, ActionBounds::default()).is_err());
    }

    #[test]
    fn encoder_lipschitz_bound() {
        let c = tiny();
        let p = PolicyParams::init(c, 6).unwrap();
        let obs = obs_for(&c, 3);
        let base = encode(&obs, &p).unwrap();
        let spectral_bound = |t: Tensor| {
            // Frobenius norm bounds the operator norm.
            p.tensor(t).iter().map(|w| w * w).sum::<f64>().sqrt()
        };
        let bound = spectral_bound(Tensor::Enc1W) * spectral_bound(Tensor::Enc2W);
        for k in 0..c.ray_dim() {
            let mut o = obs.clone();
            let delta = 1e-3;
            o[k] += delta;
            let e = encode(&o, &p).unwrap();
            let change: f64 = e.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(change <= bound * delta + 1e-15);
        }
    }

    #[test]
    fn degenerate_distribution_returns_mean() {
        let bounds = ActionBounds::default();
        let dist = ActionDistribution::new([0.3, -0.2, 0.1, 0.5], [-50.0; 4], bounds);
        assert_eq!(dist.log_std, [LOG_STD_MIN; 4]);
        let mut rng = seeded(1, 2);
        let det = sample_action(&dist, &mut rng, true);
        let m = det.command.to_array();
        for j in 0..4 {
            assert_eq!(m[j], bounds.0[j] * dist.mean[j].tanh());
        }
        // At the clamp floor the spread is exp(-5) in pre-squash units, so
        // individual draws can stray past 1e-2; the RMS deviation of the
        // normalized action does not.
        let n = 10_000;
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let a = sample_action(&dist, &mut rng, false).command.to_array();
            for j in 0..4 {
                sq[j] += ((a[j] - m[j]) / bounds.0[j]).powi(2) / n as f64;
            }
        }
        for v in sq {
            assert!(v.sqrt() < 1e-2, "rms {}", v.sqrt());
        }
    }

    #[test]
    fn samples_respect_bounds() {
        let dist = ActionDistribution::new([2.0, -3.0, 0.0, 0.5], [1.5; 4], ActionBounds::default());
        let mut rng = seeded(2, 2);
        for _ in 0..1_000_000 {
            let s = sample_action(&dist, &mut rng, false);
            let a = s.command.to_array();
            assert!(a[..3].iter().all(|v| v.abs() <= 1.5));
            assert!(a[3].abs() <= 1.5);
        }
    }

    /// The command-space density of one component integrates to one.
    #[test]
    fn density_integrates_to_one() {
        for (mean, log_std) in [(0.0, 0.0), (0.8, -0.7), (-1.5, 0.6)] {
            let bound = 1.5;
            // Other components held at their mean contribute a constant that
            // is divided out.
            let dist = ActionDistribution::new([mean, 0.0, 0.0, 0.0], [log_std, 0.0, 0.0, 0.0], ActionBounds([bound; 4]));
            let rest = {
                let raw = [mean, 0.0, 0.0, 0.0];
                dist.log_prob(&raw) - one_dim_log_density(mean, mean, log_std, bound)
            };
            let n = 200_000;
            let h = 2.0 * bound / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                let a = -bound + (i as f64 + 0.5) * h;
                let u = (a / bound).atanh();
                let lp = dist.log_prob(&[u, 0.0, 0.0, 0.0]) - rest;
                total += lp.exp() * h;
            }
            assert!((total - 1.0).abs() < 1e-3, "mean {mean} log_std {log_std}: {total}");
        }
    }

    fn one_dim_log_density(u: f64, mean: f64, log_std: f64, bound: f64) -> f64 {
        let z = (u - mean) / log_std.exp();
        -0.5 * z * z - log_std - 0.5 * LN_2PI - bound.ln() - (1.0 - u.tanh().powi(2)).ln()
    }
}

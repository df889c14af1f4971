//! Batched forward pass, truncated-BPTT backward pass and the clipped
//! surrogate loss.

use super::linalg::{accumulate_grads, affine, leaky_relu, leaky_relu_grad, matmul_nn, matmul_nt_acc, sigmoid};
use super::{squash_correction, ActionBounds, PolicyParams, Tensor, ACTION_DIM, LN_2PI, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};

/// Heads for a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `n x ACTION_DIM`, row-major.
    pub mean: Vec<f64>,
    pub value: Vec<f64>,
}

/// Activations of the feed-forward part, kept for the backward pass.
struct TrunkCache {
    rays: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    z: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

/// One LSTM step's activations.
struct LstmCache {
    /// Activated gates `i, f, g, o`, `n x 4H`.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    h_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Fixed-length sequences packed time-major.
///
/// Sequences are ordered by decreasing length, so the rows alive at time `t`
/// are the first `steps_per_time[t]` sequences. Rows of time `t` start at
/// `sum(steps_per_time[..t])`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceBatch {
    pub obs: Vec<f64>,
    pub raw_actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub steps_per_time: Vec<usize>,
    /// Recurrent state at each sequence start, `steps_per_time[0] x H`.
    pub h0: Vec<f64>,
    pub c0: Vec<f64>,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.old_log_probs.len()
    }

    fn validate(&self, params: &PolicyParams) -> Result<()> {
        let n = self.rows();
        let h = params.config.hidden;
        let lead = self.steps_per_time.first().copied().unwrap_or(0);
        let ok = n > 0
            && self.steps_per_time.iter().sum::<usize>() == n
            && self.steps_per_time.windows(2).all(|w| w[0] >= w[1])
            && self.steps_per_time.iter().all(|&k| k > 0)
            && self.obs.len() == n * params.config.input_dim()
            && self.raw_actions.len() == n * ACTION_DIM
            && self.advantages.len() == n
            && self.returns.len() == n
            && self.h0.len() == lead * h
            && self.c0.len() == lead * h;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent sequence batch".into()))
        }
    }
}

/// Coefficients of the PPO objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
    pub bounds: ActionBounds,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            normalize_advantages: true,
            bounds: ActionBounds::default(),
        }
    }
}

/// Minibatch diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

fn tanh_grad_from_value(t: f64) -> f64 {
    1.0 - t * t
}

impl PolicyParams {
    fn check_obs(&self, obs: &[f64], n: usize) -> Result<()> {
        let d = self.config.input_dim();
        if obs.len() != n * d {
            return Err(Error::Shape(format!(
                "expected {n} observations of length {d}, got {} values",
                obs.len()
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    fn trunk_forward(&self, obs: &[f64], n: usize) -> TrunkCache {
        let c = &self.config;
        let (d, rd) = (c.input_dim(), c.ray_dim());
        let extra = d - rd;
        let zd = c.encoder_out + extra;

        let mut rays = Vec::with_capacity(n * rd);
        for row in obs.chunks_exact(d) {
            rays.extend_from_slice(&row[..rd]);
        }
        let mut e1 = vec![0.0; n * c.encoder_hidden];
        affine(&rays, n, rd, self.tensor(Tensor::Enc1W), self.tensor(Tensor::Enc1B), &mut e1);
        e1.iter_mut().for_each(|v| *v = leaky_relu(*v));
        let mut e2 = vec![0.0; n * c.encoder_out];
        affine(&e1, n, c.encoder_hidden, self.tensor(Tensor::Enc2W), self.tensor(Tensor::Enc2B), &mut e2);
        e2.iter_mut().for_each(|v| *v = leaky_relu(*v));

        let mut z = Vec::with_capacity(n * zd);
        for (row, emb) in obs.chunks_exact(d).zip(e2.chunks_exact(c.encoder_out)) {
            z.extend_from_slice(emb);
            z.extend_from_slice(&row[rd..]);
        }
        let mut s1 = vec![0.0; n * c.trunk];
        affine(&z, n, zd, self.tensor(Tensor::Fc1W), self.tensor(Tensor::Fc1B), &mut s1);
        s1.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut s2 = vec![0.0; n * c.trunk];
        affine(&s1, n, c.trunk, self.tensor(Tensor::Fc2W), self.tensor(Tensor::Fc2B), &mut s2);
        s2.iter_mut().for_each(|v| *v = sigmoid(*v));
        TrunkCache { rays, e1, e2, z, s1, s2 }
    }

    /// One LSTM step for `n` rows; writes the new state into `h`, `c`.
    fn lstm_step(&self, x: &[f64], n: usize, h: &mut [f64], c: &mut [f64]) -> LstmCache {
        let hd = self.config.hidden;
        let mut gates = vec![0.0; n * 4 * hd];
        affine(x, n, self.config.trunk, self.tensor(Tensor::LstmWx), self.tensor(Tensor::LstmB), &mut gates);
        matmul_nt_acc(h, n, hd, self.tensor(Tensor::LstmWh), 4 * hd, &mut gates);
        let c_prev = c.to_vec();
        let h_prev = h.to_vec();
        let mut tanh_c = vec![0.0; n * hd];
        for r in 0..n {
            let g = &mut gates[r * 4 * hd..(r + 1) * 4 * hd];
            for k in 0..hd {
                let i = sigmoid(g[k]);
                let f = sigmoid(g[hd + k]);
                let gg = g[2 * hd + k].tanh();
                let o = sigmoid(g[3 * hd + k]);
                g[k] = i;
                g[hd + k] = f;
                g[2 * hd + k] = gg;
                g[3 * hd + k] = o;
                let cn = f * c[r * hd + k] + i * gg;
                let tc = cn.tanh();
                c[r * hd + k] = cn;
                tanh_c[r * hd + k] = tc;
                h[r * hd + k] = o * tc;
            }
        }
        LstmCache { gates, c_prev, h_prev, tanh_c }
    }

    fn heads(&self, h: &[f64], n: usize) -> StepOutput {
        let hd = self.config.hidden;
        let mut mean = vec![0.0; n * ACTION_DIM];
        affine(h, n, hd, self.tensor(Tensor::MeanW), self.tensor(Tensor::MeanB), &mut mean);
        let mut value = vec![0.0; n];
        affine(h, n, hd, self.tensor(Tensor::ValueW), self.tensor(Tensor::ValueB), &mut value);
        StepOutput { mean, value }
    }

    /// Encoder embeddings for `n` observations.
    pub fn encode_batch(&self, obs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_obs(obs, n)?;
        let c = &self.config;
        let (d, rd) = (c.input_dim(), c.ray_dim());
        let mut rays = Vec::with_capacity(n * rd);
        for row in obs.chunks_exact(d) {
            rays.extend_from_slice(&row[..rd]);
        }
        let mut e1 = vec![0.0; n * c.encoder_hidden];
        affine(&rays, n, rd, self.tensor(Tensor::Enc1W), self.tensor(Tensor::Enc1B), &mut e1);
        e1.iter_mut().for_each(|v| *v = leaky_relu(*v));
        let mut e2 = vec![0.0; n * c.encoder_out];
        affine(&e1, n, c.encoder_hidden, self.tensor(Tensor::Enc2W), self.tensor(Tensor::Enc2B), &mut e2);
        e2.iter_mut().for_each(|v| *v = leaky_relu(*v));
        Ok(e2)
    }

    /// One recurrent step for `n` independent rows. `h` and `c` (`n x H`)
    /// are advanced in place.
    pub fn forward_batch(&self, obs: &[f64], n: usize, h: &mut [f64], c: &mut [f64]) -> Result<StepOutput> {
        self.check_obs(obs, n)?;
        let hd = self.config.hidden;
        if h.len() != n * hd || c.len() != n * hd {
            return Err(Error::Shape(format!("recurrent state must hold {n} x {hd} values")));
        }
        let trunk = self.trunk_forward(obs, n);
        self.lstm_step(&trunk.s2, n, h, c);
        Ok(self.heads(h, n))
    }

    /// Value estimates along packed sequences (no gradients).
    pub fn sequence_values(&self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        batch.validate(self)?;
        let (_, out, _, _) = self.sequence_forward(batch);
        Ok(out.value)
    }

    fn sequence_forward(&self, batch: &SequenceBatch) -> (TrunkCache, StepOutput, Vec<LstmCache>, Vec<f64>) {
        let n = batch.rows();
        let hd = self.config.hidden;
        let t_dim = self.config.trunk;
        let trunk = self.trunk_forward(&batch.obs, n);
        let mut h = batch.h0.clone();
        let mut c = batch.c0.clone();
        let mut hs = vec![0.0; n * hd];
        let mut caches = Vec::with_capacity(batch.steps_per_time.len());
        let mut start = 0;
        for &k in &batch.steps_per_time {
            let x = &trunk.s2[start * t_dim..(start + k) * t_dim];
            let cache = self.lstm_step(x, k, &mut h[..k * hd], &mut c[..k * hd]);
            hs[start * hd..(start + k) * hd].copy_from_slice(&h[..k * hd]);
            caches.push(cache);
            start += k;
        }
        let out = self.heads(&hs, n);
        (trunk, out, caches, hs)
    }

    /// Clipped-surrogate loss on a packed batch, without gradients.
    pub fn loss(&self, batch: &SequenceBatch, cfg: &LossConfig) -> Result<LossStats> {
        self.loss_impl(batch, cfg, None)
    }

    /// Loss and its gradient. `grad` (same length as the parameters) is
    /// overwritten.
    pub fn loss_and_grad(&self, batch: &SequenceBatch, cfg: &LossConfig, grad: &mut [f64]) -> Result<LossStats> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape("gradient buffer length differs from parameters".into()));
        }
        grad.fill(0.0);
        self.loss_impl(batch, cfg, Some(grad))
    }

    fn loss_impl(&self, batch: &SequenceBatch, cfg: &LossConfig, grad: Option<&mut [f64]>) -> Result<LossStats> {
        batch.validate(self)?;
        self.check_obs(&batch.obs, batch.rows())?;
        let n = batch.rows();
        let nf = n as f64;
        let (trunk, out, caches, hs) = self.sequence_forward(batch);

        let adv: Vec<f64> = if cfg.normalize_advantages && n > 1 {
            let m = batch.advantages.iter().sum::<f64>() / nf;
            let var = batch.advantages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / nf;
            let s = var.sqrt() + 1e-8;
            batch.advantages.iter().map(|a| (a - m) / s).collect()
        } else {
            batch.advantages.clone()
        };

        let raw_log_std = self.tensor(Tensor::LogStd);
        let log_std = self.log_std();
        let inv_var: [f64; ACTION_DIM] = std::array::from_fn(|j| (-2.0 * log_std[j]).exp());
        let entropy: f64 = log_std.iter().map(|s| 0.5 + 0.5 * LN_2PI + s).sum();

        let mut stats = LossStats {
            entropy,
            ..Default::default()
        };
        let mut d_mean = vec![0.0; n * ACTION_DIM];
        let mut d_value = vec![0.0; n];
        let mut d_log_std = [0.0; ACTION_DIM];
        for r in 0..n {
            let u: [f64; ACTION_DIM] = std::array::from_fn(|j| batch.raw_actions[r * ACTION_DIM + j]);
            let mu = &out.mean[r * ACTION_DIM..(r + 1) * ACTION_DIM];
            let mut lp = 0.0;
            for j in 0..ACTION_DIM {
                let dz = u[j] - mu[j];
                lp += -0.5 * dz * dz * inv_var[j] - log_std[j] - 0.5 * LN_2PI;
            }
            lp -= squash_correction(&u, &cfg.bounds);
            let log_ratio = lp - batch.old_log_probs[r];
            let ratio = log_ratio.exp();
            let a = adv[r];
            let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
            let unclipped_active = ratio * a <= clipped * a;
            stats.policy -= (ratio * a).min(clipped * a) / nf;
            if (ratio - 1.0).abs() > cfg.clip {
                stats.clip_fraction += 1.0 / nf;
            }
            stats.approx_kl += ((ratio - 1.0) - log_ratio) / nf;
            let v_err = out.value[r] - batch.returns[r];
            stats.value += v_err * v_err / nf;

            let d_lp = if unclipped_active { -a * ratio / nf } else { 0.0 };
            for j in 0..ACTION_DIM {
                let dz = u[j] - mu[j];
                d_mean[r * ACTION_DIM + j] = d_lp * dz * inv_var[j];
                d_log_std[j] += d_lp * (dz * dz * inv_var[j] - 1.0);
            }
            d_value[r] = cfg.value_coef * 2.0 * v_err / nf;
        }
        stats.total = stats.policy + cfg.value_coef * stats.value - cfg.entropy_coef * entropy;
        if !stats.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{stats:?}")));
        }

        let Some(grad) = grad else {
            return Ok(stats);
        };
        let layout = self.layout().clone();
        for j in 0..ACTION_DIM {
            let inside = raw_log_std[j] > LOG_STD_MIN && raw_log_std[j] < LOG_STD_MAX;
            if inside {
                grad[layout.range(Tensor::LogStd)][j] = d_log_std[j] - cfg.entropy_coef;
            }
        }
        self.backward(batch, &trunk, &caches, &hs, &d_mean, &d_value, grad);
        Ok(stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        batch: &SequenceBatch,
        trunk: &TrunkCache,
        caches: &[LstmCache],
        hs: &[f64],
        d_mean: &[f64],
        d_value: &[f64],
        grad: &mut [f64],
    ) {
        let c = &self.config;
        let layout = self.layout().clone();
        let n = batch.rows();
        let hd = c.hidden;
        let td = c.trunk;
        let (d, rd) = (c.input_dim(), c.ray_dim());
        let zd = c.encoder_out + (d - rd);

        let acc = |grad: &mut [f64], w: Tensor, b: Option<Tensor>, dy: &[f64], rows: usize, out: usize, x: &[f64], input: usize| {
            accumulate_grads(dy, rows, out, x, input, &mut grad[layout.range(w)], None);
            if let Some(b) = b {
                let gb = &mut grad[layout.range(b)];
                for row in dy.chunks_exact(out) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
        };

        // Heads.
        acc(grad, Tensor::MeanW, Some(Tensor::MeanB), d_mean, n, ACTION_DIM, hs, hd);
        acc(grad, Tensor::ValueW, Some(Tensor::ValueB), d_value, n, 1, hs, hd);
        let mut dh_out = vec![0.0; n * hd];
        matmul_nn(d_mean, n, ACTION_DIM, self.tensor(Tensor::MeanW), hd, &mut dh_out, false);
        matmul_nn(d_value, n, 1, self.tensor(Tensor::ValueW), hd, &mut dh_out, true);

        // LSTM, backwards in time.
        let lead = batch.steps_per_time[0];
        let mut dh_next = vec![0.0; lead * hd];
        let mut dc_next = vec![0.0; lead * hd];
        let mut dx = vec![0.0; n * td];
        let starts: Vec<usize> = batch
            .steps_per_time
            .iter()
            .scan(0, |s, &k| {
                let v = *s;
                *s += k;
                Some(v)
            })
            .collect();
        for t in (0..batch.steps_per_time.len()).rev() {
            let k = batch.steps_per_time[t];
            let start = starts[t];
            let cache = &caches[t];
            // Rows that ended at this step receive no gradient from later steps.
            let k_next = batch.steps_per_time.get(t + 1).copied().unwrap_or(0);
            dh_next[k_next * hd..k * hd].fill(0.0);
            dc_next[k_next * hd..k * hd].fill(0.0);
            let mut dgates = vec![0.0; k * 4 * hd];
            for r in 0..k {
                let g = &cache.gates[r * 4 * hd..(r + 1) * 4 * hd];
                let dg = &mut dgates[r * 4 * hd..(r + 1) * 4 * hd];
                for j in 0..hd {
                    let idx = r * hd + j;
                    let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let tc = cache.tanh_c[idx];
                    let dh = dh_out[(start + r) * hd + j] + dh_next[idx];
                    let d_o = dh * tc;
                    let dc = dh * o * tanh_grad_from_value(tc) + dc_next[idx];
                    dg[j] = dc * gg * i * (1.0 - i);
                    dg[hd + j] = dc * cache.c_prev[idx] * f * (1.0 - f);
                    dg[2 * hd + j] = dc * i * tanh_grad_from_value(gg);
                    dg[3 * hd + j] = d_o * o * (1.0 - o);
                    dc_next[idx] = dc * f;
                }
            }
            let x = &trunk.s2[start * td..(start + k) * td];
            acc(grad, Tensor::LstmWx, Some(Tensor::LstmB), &dgates, k, 4 * hd, x, td);
            acc(grad, Tensor::LstmWh, None, &dgates, k, 4 * hd, &cache.h_prev, hd);
            matmul_nn(&dgates, k, 4 * hd, self.tensor(Tensor::LstmWx), td, &mut dx[start * td..(start + k) * td], false);
            matmul_nn(&dgates, k, 4 * hd, self.tensor(Tensor::LstmWh), hd, &mut dh_next[..k * hd], false);
        }

        // Trunk.
        let mut dpre = dx;
        for (g, s) in dpre.iter_mut().zip(&trunk.s2) {
            *g *= s * (1.0 - s);
        }
        acc(grad, Tensor::Fc2W, Some(Tensor::Fc2B), &dpre, n, td, &trunk.s1, td);
        let mut ds1 = vec![0.0; n * td];
        matmul_nn(&dpre, n, td, self.tensor(Tensor::Fc2W), td, &mut ds1, false);
        for (g, s) in ds1.iter_mut().zip(&trunk.s1) {
            *g *= s * (1.0 - s);
        }
        acc(grad, Tensor::Fc1W, Some(Tensor::Fc1B), &ds1, n, td, &trunk.z, zd);
        let mut dz = vec![0.0; n * zd];
        matmul_nn(&ds1, n, td, self.tensor(Tensor::Fc1W), zd, &mut dz, false);

        // Encoder (only the embedding part of z has parameters upstream).
        let eo = c.encoder_out;
        let mut de2 = Vec::with_capacity(n * eo);
        for (row, act) in dz.chunks_exact(zd).zip(trunk.e2.chunks_exact(eo)) {
            de2.extend(row[..eo].iter().zip(act).map(|(g, a)| g * leaky_relu_grad(*a)));
        }
        acc(grad, Tensor::Enc2W, Some(Tensor::Enc2B), &de2, n, eo, &trunk.e1, c.encoder_hidden);
        let mut de1 = vec![0.0; n * c.encoder_hidden];
        matmul_nn(&de2, n, eo, self.tensor(Tensor::Enc2W), c.encoder_hidden, &mut de1, false);
        for (g, a) in de1.iter_mut().zip(&trunk.e1) {
            *g *= leaky_relu_grad(*a);
        }
        acc(grad, Tensor::Enc1W, Some(Tensor::Enc1B), &de1, n, c.encoder_hidden, &trunk.rays, rd);
    }
}

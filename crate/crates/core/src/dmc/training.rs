//! Continuous relaxation used to retrofit a model for compression.
//!
//! The taped versions of accumulation and masking live on
//! [`Tape`](crate::numerics::Tape); the functions here are the eager
//! single-head forms plus the loss values and schedules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{accumulate_forward, kernels, Tensor};

use super::{DmcError, OMEGA_FLOOR};

/// Decision-sampling hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelParams {
    /// Sampling temperature.
    pub tau: f64,
    /// Offset subtracted from the decision logit so training starts with
    /// almost no merging.
    pub c: f64,
}

impl Default for GumbelParams {
    fn default() -> Self {
        Self { tau: 0.1, c: 5.0 }
    }
}

impl GumbelParams {
    pub fn validate(&self) -> Result<(), DmcError> {
        if !(self.tau > 0.0) {
            return Err(DmcError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One standard Gumbel draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Difference of two independent Gumbel draws (standard logistic noise),
/// one per element.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| gumbel(rng) - gumbel(rng)).collect()
}

/// Pre-sigmoid relaxed decision logits `(logit - c + g1 - g2) / tau`.
/// `noise` of `None` gives the deterministic zero-noise form.
pub fn relaxed_logits(logits: &[f64], params: &GumbelParams, noise: Option<&[f64]>) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| (l - params.c + noise.map_or(0.0, |n| n[i])) / params.tau)
        .collect()
}

/// Relaxed decisions `sigmoid((logit - c + g1 - g2) / tau)`. Passing no
/// rng gives the zero-noise evaluation form.
pub fn gumbel_sigmoid_sample<R: Rng + ?Sized>(
    logits: &Tensor,
    params: &GumbelParams,
    rng: Option<&mut R>,
) -> Result<Tensor, DmcError> {
    params.validate()?;
    let noise = rng.map(|r| logistic_noise(r, logits.len()));
    let z = relaxed_logits(logits.data(), params, noise.as_deref());
    Ok(Tensor::new(logits.shape(), z.into_iter().map(kernels::sigmoid).collect())?)
}

/// Running importance-weighted averages for one head with relaxed
/// decisions; every intermediate state is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulated {
    /// `[n, dim]` accumulated keys.
    pub keys: Tensor,
    /// `[n, dim]` accumulated values.
    pub values: Tensor,
    /// Running importance sums, one per position.
    pub z: Vec<f64>,
}

fn check_aligned(keys: &Tensor, values: &Tensor, alpha: &[f64], omega: &[f64]) -> Result<usize, DmcError> {
    let n = keys.shape().first().copied().unwrap_or(0);
    if keys.rank() != 2 || keys.shape() != values.shape() || alpha.len() != n || omega.len() != n {
        return Err(DmcError::Length(format!(
            "keys {:?}, values {:?}, alpha {}, omega {} are not aligned",
            keys.shape(),
            values.shape(),
            alpha.len(),
            omega.len()
        )));
    }
    Ok(n)
}

/// Exact partial accumulation over the whole sequence:
/// `z_0 = w_0`, `k_0 = k_0`;
/// `z_i = z_{i-1} a_i + w_i`, `k_i = (a_i k_{i-1} z_{i-1} + k_i w_i) / z_i`.
/// Importances below the floor are clamped to it.
pub fn partial_accumulate(
    keys: &Tensor,
    values: &Tensor,
    alpha: &[f64],
    omega: &[f64],
) -> Result<Accumulated, DmcError> {
    let n = check_aligned(keys, values, alpha, omega)?;
    let dim = keys.shape()[1];
    let mut out_k = vec![0.0; n * dim];
    let mut out_v = vec![0.0; n * dim];
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let w = omega[i].max(OMEGA_FLOOR);
        if i == 0 {
            z.push(w);
            out_k[..dim].copy_from_slice(keys.row(0));
            out_v[..dim].copy_from_slice(values.row(0));
            continue;
        }
        let z_prev = z[i - 1];
        let z_new = z_prev * alpha[i] + w;
        for c in 0..dim {
            out_k[i * dim + c] = (alpha[i] * out_k[(i - 1) * dim + c] * z_prev + keys.at2(i, c) * w) / z_new;
            out_v[i * dim + c] = (alpha[i] * out_v[(i - 1) * dim + c] * z_prev + values.at2(i, c) * w) / z_new;
        }
        z.push(z_new);
    }
    Ok(Accumulated {
        keys: Tensor::new(&[n, dim], out_k)?,
        values: Tensor::new(&[n, dim], out_v)?,
        z,
    })
}

/// Windowed approximation: position `i` runs the recurrence only over
/// `max(0, i + 1 - window)..=i`, with the window start treated as a fresh
/// segment base.
pub fn windowed_accumulate(
    keys: &Tensor,
    values: &Tensor,
    alpha: &[f64],
    omega: &[f64],
    window: usize,
) -> Result<Accumulated, DmcError> {
    let n = check_aligned(keys, values, alpha, omega)?;
    if window == 0 {
        return Err(DmcError::Config("window must be at least 1".into()));
    }
    let dim = keys.shape()[1];
    let omega: Vec<f64> = omega.iter().map(|w| w.max(OMEGA_FLOOR)).collect();
    let k = accumulate_forward(keys.data(), alpha, &omega, n, 1, dim, window);
    let v = accumulate_forward(values.data(), alpha, &omega, n, 1, dim, window);
    let z = (0..n)
        .map(|i| {
            let s = (i + 1).saturating_sub(window);
            (s + 1..=i).fold(omega[s], |z, t| z * alpha[t] + omega[t])
        })
        .collect();
    Ok(Accumulated {
        keys: Tensor::new(&[n, dim], k)?,
        values: Tensor::new(&[n, dim], v)?,
        z,
    })
}

/// `[n, n]` additive mask from pre-sigmoid decision logits:
/// `log_sigmoid(-logit[j + 1])` for `j < i`, 0 on the diagonal, `-inf`
/// above it.
pub fn dmc_mask_from_logits(logits: &[f64], n: usize) -> Result<Tensor, DmcError> {
    if logits.len() < n {
        return Err(DmcError::Length(format!("{} decision logits for {n} positions", logits.len())));
    }
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        match j.cmp(&i) {
            std::cmp::Ordering::Less => kernels::log_sigmoid(-logits[j + 1]),
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => f64::NEG_INFINITY,
        }
    }))
}

/// `[n, n]` additive mask from decision values: `log(1 - alpha[j + 1])`
/// for `j < i` (so `alpha = 1` gives `-inf`), 0 on the diagonal, `-inf`
/// above it.
pub fn dmc_mask_from_alpha(alpha: &[f64], n: usize) -> Result<Tensor, DmcError> {
    if alpha.len() < n {
        return Err(DmcError::Length(format!("{} decisions for {n} positions", alpha.len())));
    }
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        match j.cmp(&i) {
            std::cmp::Ordering::Less => (1.0 - alpha[j + 1]).ln(),
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => f64::NEG_INFINITY,
        }
    }))
}

/// Global one-sided compression loss
/// `max(0, sum(1 - alpha) - N / target_cr) / N` over every decision in
/// every slice, `N` being the total count.
pub fn cr_loss_value(alphas: &[&[f64]], target_cr: f64) -> f64 {
    let total: usize = alphas.iter().map(|a| a.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let kept: f64 = alphas.iter().flat_map(|a| a.iter()).map(|a| 1.0 - a).sum();
    let budget = total as f64 / target_cr;
    (kept - budget).max(0.0) / total as f64
}

/// Head-consistency loss: the absolute deviation of each head's decision
/// from the per-layer mean over heads, summed and divided by the total
/// decision count. Each entry is `(heads, n, data)` for one layer.
pub fn head_consistency_value(layers: &[(usize, usize, &[f64])]) -> f64 {
    let total: usize = layers.iter().map(|(h, n, _)| h * n).sum();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for &(heads, n, data) in layers {
        for t in 0..n {
            let mean = (0..heads).map(|h| data[h * n + t]).sum::<f64>() / heads as f64;
            sum += (0..heads).map(|h| (data[h * n + t] - mean).abs()).sum::<f64>();
        }
    }
    sum / total as f64
}

/// Scale applied to dimension 0 of queries and keys at adaptation step
/// `step` of `total`: `1 - step / total`.
pub fn anneal_factor(step: usize, total: usize) -> Result<f64, DmcError> {
    if step > total {
        return Err(DmcError::Schedule(format!("annealing step {step} past total {total}")));
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - step as f64 / total as f64)
}

/// Scales `(q0, k0)` by the annealing factor.
pub fn anneal_first_neuron(q0: f64, k0: f64, step: usize, total: usize) -> Result<(f64, f64), DmcError> {
    let f = anneal_factor(step, total)?;
    Ok((q0 * f, k0 * f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampMode {
    /// Target rises linearly from the start value.
    LinearRamp,
    /// Target is set to its final value from the first step.
    Immediate,
}

/// Target compression schedule followed by a fixed-target solidify phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrSchedule {
    pub start_cr: f64,
    pub target_cr: f64,
    pub ramp_steps: usize,
    pub solidify_steps: usize,
    pub mode: RampMode,
}

impl Default for CrSchedule {
    fn default() -> Self {
        Self {
            start_cr: 1.0,
            target_cr: 2.0,
            ramp_steps: 2000,
            solidify_steps: 500,
            mode: RampMode::LinearRamp,
        }
    }
}

/// Learning-rate multiplier at the end of the solidify phase.
pub const SOLIDIFY_FINAL_LR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub target_cr: f64,
    pub lr_mult: f64,
    pub solidifying: bool,
}

impl CrSchedule {
    pub fn validate(&self) -> Result<(), DmcError> {
        if !(self.target_cr >= 1.0) || !(self.start_cr >= 1.0) || self.start_cr > self.target_cr {
            return Err(DmcError::Config(format!(
                "need 1 <= start_cr ({}) <= target_cr ({})",
                self.start_cr, self.target_cr
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.ramp_steps + self.solidify_steps
    }

    /// Target and learning-rate multiplier at `step`. Past the end the
    /// final values hold.
    pub fn at(&self, step: usize) -> ScheduleState {
        if step < self.ramp_steps {
            let target_cr = match self.mode {
                RampMode::Immediate => self.target_cr,
                RampMode::LinearRamp => {
                    let frac = step as f64 / self.ramp_steps as f64;
                    self.start_cr + (self.target_cr - self.start_cr) * frac
                }
            };
            return ScheduleState {
                target_cr,
                lr_mult: 1.0,
                solidifying: false,
            };
        }
        let into = (step - self.ramp_steps).min(self.solidify_steps);
        let lr_mult = if self.solidify_steps == 0 {
            1.0
        } else {
            let progress = into as f64 / self.solidify_steps as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            SOLIDIFY_FINAL_LR + (1.0 - SOLIDIFY_FINAL_LR) * cosine
        };
        ScheduleState {
            target_cr: self.target_cr,
            lr_mult,
            solidifying: true,
        }
    }
}

/// Current target compression ratio and learning-rate multiplier.
pub fn schedule_target_cr(step: usize, schedule: &CrSchedule) -> ScheduleState {
    schedule.at(step)
}

//! Flow-matching schedule: the linear data/noise interpolant, its constant
//! velocity target, the masked flow-matching loss and per-frame timestep
//! sampling.
//!
//! Time runs from `t = 0` (clean data) to `t = 1` (pure noise). Clean context
//! frames are tagged with [`SENTINEL_CLEAN`], which lies outside that range and
//! never reaches [`interpolate`] or [`fm_loss`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Timestep marking a clean (un-noised) context frame.
pub const SENTINEL_CLEAN: f64 = -1.0;

pub fn is_sentinel(t: f64) -> bool {
    t == SENTINEL_CLEAN
}

/// Per-frame timesteps plus the loss mask they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepAssignment {
    t: Vec<f64>,
    loss_mask: Vec<bool>,
}

impl TimestepAssignment {
    /// Every entry must be in `[0, 1]` or equal to [`SENTINEL_CLEAN`].
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if let Some(bad) = t
            .iter()
            .find(|&&v| !is_sentinel(v) && !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Range(format!("timestep {bad} outside [0,1]")));
        }
        let loss_mask = t.iter().map(|&v| !is_sentinel(v)).collect();
        Ok(TimestepAssignment { t, loss_mask })
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn num_clean(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| !m).count()
    }
}

/// `(1 - t)·x0 + t·x1`.
pub fn interpolate<F: Scalar>(x0: &Tensor<F>, x1: &Tensor<F>, t: f64) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("interpolation time {t} outside [0,1]")));
    }
    let (a, b) = (F::of(1.0 - t), F::of(t));
    x0.zip_map(x1, "interpolate", |u, v| a * u + b * v)
}

/// Constant velocity `x1 - x0` of the linear interpolant.
pub fn velocity_target<F: Scalar>(x0: &Tensor<F>, x1: &Tensor<F>) -> Result<Tensor<F>> {
    x0.zip_map(x1, "velocity_target", |u, v| v - u)
}

/// Mean squared error over the elements of frames whose mask is set.
pub fn fm_loss<F: Scalar>(
    v_pred: &[Tensor<F>],
    v_star: &[Tensor<F>],
    loss_mask: &[bool],
) -> Result<F> {
    if v_pred.len() != v_star.len() || v_pred.len() != loss_mask.len() {
        return Err(Error::shape(
            "fm_loss",
            &[v_pred.len(), v_star.len()],
            &[loss_mask.len()],
        ));
    }
    let mut sse = F::zero();
    let mut count = 0usize;
    for ((p, s), &m) in v_pred.iter().zip(v_star).zip(loss_mask) {
        if p.shape() != s.shape() {
            return Err(Error::shape("fm_loss", p.shape(), s.shape()));
        }
        if !m {
            continue;
        }
        sse = sse
            + p.data()
                .iter()
                .zip(s.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>();
        count += p.len();
    }
    if count == 0 {
        return Err(Error::NoLossFrames);
    }
    Ok(sse / F::of(count as f64))
}

/// Distribution of per-frame training timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimestepSampler {
    Uniform,
    LogitNormal { mu: f64, sigma: f64 },
}

impl Default for TimestepSampler {
    fn default() -> Self {
        TimestepSampler::Uniform
    }
}

impl TimestepSampler {
    pub fn logit_normal_default() -> Self {
        TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 }
    }

    /// One draw in the open interval `(0, 1)`.
    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        loop {
            let t = match *self {
                TimestepSampler::Uniform => rng.random::<f64>(),
                TimestepSampler::LogitNormal { mu, sigma } => {
                    let z: f64 = StandardNormal.sample(rng);
                    1.0 / (1.0 + (-(mu + sigma * z)).exp())
                }
            };
            if t > 0.0 && t < 1.0 {
                return t;
            }
        }
    }
}

/// Independent timesteps for `frames` frames.
pub fn sample_timesteps(frames: usize, sampler: TimestepSampler, rng: &mut impl Rng) -> Vec<f64> {
    (0..frames).map(|_| sampler.draw(rng)).collect()
}

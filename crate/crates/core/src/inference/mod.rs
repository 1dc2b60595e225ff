//! Frame-by-frame autoregressive sampling.
//!
//! Each new frame starts from unit Gaussian noise at `t = 1` and is integrated
//! to `t = 0` with explicit Euler steps on the predicted velocity. Prior frames
//! enter as clean context, either recomputed on every call, read from a KV
//! cache, or read from the two-level cache that compresses older frames with
//! the long kernel.

mod cache;
mod timing;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{CachedFrame, EncodeCond, KvCacheStore};
pub use timing::{last_quartile_slope, timing_harness, write_timing_csv, TimingConfig, TimingRow};

use crate::error::{Error, Result};
use crate::masking::AttentionPolicy;
use crate::model::{FarModel, ForwardInput, FrameInput, PastKv};
use crate::numerics::{Scalar, Tensor};
use crate::schedule::{interpolate, SENTINEL_CLEAN};
use crate::tokenizer::{patchify, Tier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Recompute the whole context for every velocity evaluation.
    #[default]
    None,
    Kv,
    Multilevel,
}

impl std::str::FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CacheMode::None),
            "kv" => Ok(CacheMode::Kv),
            "multilevel" => Ok(CacheMode::Multilevel),
            other => Err(Error::Invalid(format!("unknown cache mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale `s`; 1 disables the unconditional pass.
    pub guidance: f64,
    pub cache_mode: CacheMode,
    /// Short-term window `n`. When set, frames older than the window are
    /// represented with the long kernel.
    #[serde(default)]
    pub short_window: Option<usize>,
    /// Noise level applied to context frames; 0 keeps them clean.
    #[serde(default)]
    pub context_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance: 1.0,
            cache_mode: CacheMode::None,
            short_window: None,
            context_noise: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, model: &crate::model::ModelConfig) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("at least one Euler step is required".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Range(format!("guidance scale {}", self.guidance)));
        }
        if !(0.0..1.0).contains(&self.context_noise) {
            return Err(Error::Range(format!("context noise {}", self.context_noise)));
        }
        match (self.cache_mode, self.short_window) {
            (_, Some(0)) => Err(Error::Invalid("short window must be at least 1".into())),
            (CacheMode::Multilevel, None) => Err(Error::Invalid("multilevel caching needs a short window".into())),
            (CacheMode::Kv, Some(_)) => Err(Error::Invalid(
                "a single-level KV cache keeps full-resolution frames; use multilevel for a short window".into(),
            )),
            (_, Some(_)) if !model.tiers_enabled => Err(Error::Invalid(
                "long short-term context needs a model with tiers enabled".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` down to `t = 0` on a uniform grid:
/// `x ← x − Δ·v(x, t)`.
pub fn euler_integrate<F: Scalar>(
    x1: Tensor<F>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<F>, f64) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    if steps == 0 {
        return Err(Error::Invalid("at least one Euler step is required".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = velocity(&x, t)?;
        let step = F::of(dt);
        x = x.zip_map(&v, "euler", |a, b| a - step * b)?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("Euler state at t={t}")));
        }
    }
    Ok(x)
}

/// `v_u + s·(v_c − v_u)`; `s = 1` returns `v_c` itself.
pub fn guided_velocity<F: Scalar>(cond: &Tensor<F>, uncond: &Tensor<F>, s: f64) -> Result<Tensor<F>> {
    if s == 1.0 {
        if cond.shape() != uncond.shape() {
            return Err(Error::shape("guidance", cond.shape(), uncond.shape()));
        }
        return Ok(cond.clone());
    }
    let s = F::of(s);
    uncond.zip_map(cond, "guidance", |u, c| u + s * (c - u))
}

pub(crate) fn mix(seed: u64, stream: u64, index: usize) -> u64 {
    let mut z = seed ^ stream.rotate_left(32) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

const NOISE_STREAM: u64 = 1;
const CONTEXT_STREAM: u64 = 2;

/// Starting noise for frame `index`.
pub fn frame_noise<F: Scalar>(shape: &[usize], seed: u64, index: usize) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, NOISE_STREAM, index));
    Tensor::randn(shape, 1.0, &mut rng)
}

/// A generation session: clean history plus whatever caches the mode needs.
#[derive(Debug, Clone)]
pub struct Session<'m, F> {
    model: &'m FarModel<F>,
    cfg: SamplerConfig,
    class: Option<usize>,
    history: Vec<(Tensor<F>, Option<usize>)>,
    cond_store: KvCacheStore<F>,
    uncond_store: Option<KvCacheStore<F>>,
}

impl<'m, F: Scalar> Session<'m, F> {
    pub fn new(model: &'m FarModel<F>, cfg: SamplerConfig, class: Option<usize>) -> Result<Self> {
        cfg.validate(model.config())?;
        let store = || match cfg.cache_mode {
            CacheMode::Multilevel => KvCacheStore::multilevel(cfg.short_window.expect("validated")),
            _ => Ok(KvCacheStore::unbounded()),
        };
        let uncond_store = if cfg.guidance != 1.0 { Some(store()?) } else { None };
        Ok(Session {
            model,
            class,
            cond_store: store()?,
            uncond_store,
            cfg,
            history: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn store(&self) -> &KvCacheStore<F> {
        &self.cond_store
    }

    pub fn history(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.history.iter().map(|(f, _)| f)
    }

    fn context_t(&self) -> f64 {
        if self.cfg.context_noise > 0.0 {
            self.cfg.context_noise
        } else {
            SENTINEL_CLEAN
        }
    }

    /// Latent a context frame is presented with.
    fn context_latent(&self, index: usize, clean: &Tensor<F>) -> Result<Tensor<F>> {
        if self.cfg.context_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, CONTEXT_STREAM, index));
            let noise = Tensor::randn(clean.shape(), 1.0, &mut rng);
            interpolate(clean, &noise, self.cfg.context_noise)
        } else {
            Ok(clean.clone())
        }
    }

    fn cond(&self, null_cond: bool) -> EncodeCond {
        EncodeCond {
            class: self.class,
            null_cond,
        }
    }

    /// Slides the multi-level window when L1 has no room for another frame.
    fn evict_if_needed(&mut self) -> Result<()> {
        if self.cond_store.needs_eviction() {
            let model = self.model;
            let (c, u) = (self.cond(false), self.cond(true));
            self.cond_store.evict_and_reencode(model, c)?;
            if let Some(s) = self.uncond_store.as_mut() {
                s.evict_and_reencode(model, u)?;
            }
        }
        Ok(())
    }

    /// Appends a clean frame to the context.
    pub fn push_frame(&mut self, frame: Tensor<F>, action: Option<usize>) -> Result<()> {
        let index = self.history.len();
        let shape = self.model.config().latent.shape();
        if frame.shape() != shape {
            return Err(Error::shape("context frame", frame.shape(), &shape));
        }
        if self.cfg.cache_mode != CacheMode::None {
            self.evict_if_needed()?;
            let latent = self.context_latent(index, &frame)?;
            let t = self.context_t();
            let model = self.model;
            let (c, u) = (self.cond(false), self.cond(true));
            self.cond_store.cache_frame(model, index, &latent, action, t, c)?;
            if let Some(s) = self.uncond_store.as_mut() {
                s.cache_frame(model, index, &latent, action, t, u)?;
            }
        }
        self.history.push((frame, action));
        Ok(())
    }

    /// Context frames for a recompute forward, in the long-short or uniform layout.
    fn recompute_context(&self) -> Result<Vec<FrameInput<F>>> {
        let cfg = self.model.config();
        let k = self.history.len();
        let n_long = match self.cfg.short_window {
            Some(n) => k.saturating_sub(n - 1),
            None => 0,
        };
        let t = self.context_t();
        self.history
            .iter()
            .enumerate()
            .map(|(i, (f, a))| {
                let latent = self.context_latent(i, f)?;
                let (tier, kernel) = if i < n_long {
                    (Tier::Long, cfg.long_kernel)
                } else {
                    (Tier::Short, cfg.short_kernel)
                };
                Ok(FrameInput {
                    index: i,
                    tier,
                    tokens: patchify(&latent, kernel)?,
                    t,
                    action: *a,
                    predict: false,
                })
            })
            .collect()
    }

    /// Generates the next frame without appending it.
    pub fn sample_next(&mut self, action: Option<usize>) -> Result<Tensor<F>> {
        let model = self.model;
        let cfg = model.config();
        let index = self.history.len();
        self.evict_if_needed()?;
        let (context, past_c, past_u): (Vec<FrameInput<F>>, Option<PastKv<F>>, Option<PastKv<F>>) =
            match self.cfg.cache_mode {
                CacheMode::None => (self.recompute_context()?, None, None),
                _ => (
                    Vec::new(),
                    self.cond_store.past()?,
                    match &self.uncond_store {
                        Some(s) => s.past()?,
                        None => None,
                    },
                ),
            };
        let guidance = self.cfg.guidance;
        let class = self.class;
        let eval = |x: &Tensor<F>, t: f64, null_cond: bool, past: Option<&PastKv<F>>| -> Result<Tensor<F>> {
            let mut frames = context.clone();
            frames.push(FrameInput {
                index,
                tier: Tier::Short,
                tokens: patchify(x, cfg.short_kernel)?,
                t,
                action,
                predict: true,
            });
            let input = ForwardInput {
                frames,
                class,
                null_cond,
                policy: AttentionPolicy::FrameCausal,
            };
            let mut v = model.velocity(&input, past)?;
            Ok(v.pop().expect("one predicted frame"))
        };
        let x1 = frame_noise(&cfg.latent.shape(), self.cfg.seed, index);
        euler_integrate(x1, self.cfg.steps, |x, t| {
            let vc = eval(x, t, false, past_c.as_ref())?;
            if guidance == 1.0 {
                return Ok(vc);
            }
            let vu = eval(x, t, true, past_u.as_ref())?;
            guided_velocity(&vc, &vu, guidance)
        })
    }

    /// Generates the next frame and appends it to the context.
    pub fn next_frame(&mut self, action: Option<usize>) -> Result<Tensor<F>> {
        let f = self.sample_next(action)?;
        self.push_frame(f.clone(), action)?;
        Ok(f)
    }
}

/// Generated frames plus per-frame wallclock.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<F> {
    pub frames: Vec<Tensor<F>>,
    pub seconds: Vec<f64>,
}

/// Continues `context` by `p` frames. `actions`, when given, covers the
/// context and the generated frames.
pub fn predict<F: Scalar>(
    model: &FarModel<F>,
    context: &[Tensor<F>],
    actions: Option<&[usize]>,
    class: Option<usize>,
    p: usize,
    cfg: &SamplerConfig,
) -> Result<Rollout<F>> {
    if let Some(a) = actions {
        if a.len() < context.len() + p {
            return Err(Error::shape("rollout actions", &[a.len()], &[context.len() + p]));
        }
    }
    let action = |i: usize| actions.map(|a| a[i]);
    let mut s = Session::new(model, cfg.clone(), class)?;
    for (i, f) in context.iter().enumerate() {
        s.push_frame(f.clone(), action(i))?;
    }
    let mut frames = Vec::with_capacity(p);
    let mut seconds = Vec::with_capacity(p);
    for j in 0..p {
        let start = Instant::now();
        frames.push(s.next_frame(action(context.len() + j))?);
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(Rollout { frames, seconds })
}

#[cfg(test)]
mod tests;

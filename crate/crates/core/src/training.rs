//! Batch assembly and optimization.
//!
//! Each training sample is a window of one video. Every short-term frame gets
//! its own timestep; a Bernoulli fraction of them is replaced by clean context
//! tagged with the sentinel and dropped from the loss. With tiers enabled, a
//! random number of frames right before the short window is carried along as
//! clean long-term context, re-patchified with the long kernel.

use std::io::Write;
use std::ops::Range;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::masking::AttentionPolicy;
use crate::model::{FarModel, ForwardInput, FrameInput, ModelConfig};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::par::{self, Execution};
use crate::schedule::{interpolate, is_sentinel, velocity_target, TimestepAssignment, TimestepSampler, SENTINEL_CLEAN};
use crate::tokenizer::{patchify, Tier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainWindowConfig {
    /// Longest training sequence in frames (long-term plus short-term).
    pub m: usize,
    /// Short-term window length.
    pub n: usize,
    #[serde(default = "default_scc")]
    pub scc_fraction: f64,
    #[serde(default = "default_cfg_drop")]
    pub cfg_drop: f64,
    #[serde(default)]
    pub sampler: TimestepSampler,
}

fn default_scc() -> f64 {
    0.1
}

fn default_cfg_drop() -> f64 {
    0.1
}

impl TrainWindowConfig {
    pub fn new(m: usize, n: usize) -> Self {
        TrainWindowConfig {
            m,
            n,
            scc_fraction: default_scc(),
            cfg_drop: default_cfg_drop(),
            sampler: TimestepSampler::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.m {
            return Err(Error::Invalid(format!(
                "window needs 1 <= n <= m, got n={} m={}",
                self.n, self.m
            )));
        }
        for (name, p) in [("scc_fraction", self.scc_fraction), ("cfg_drop", self.cfg_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Range(format!("{name} {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// A video in the working dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Video<F> {
    /// `[H, W, d]` per frame.
    pub frames: Vec<Tensor<F>>,
    pub actions: Option<Vec<usize>>,
    pub class: Option<usize>,
}

impl<F: Scalar> Video<F> {
    pub fn new(frames: Vec<Tensor<F>>) -> Self {
        Video {
            frames,
            actions: None,
            class: None,
        }
    }

    pub fn from_episode(ep: &Episode) -> Self {
        Video {
            frames: ep.frames_as(0, ep.len()),
            actions: Some(ep.action_ids()),
            class: None,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `k_long` uniform on `0..=m-n`; the short window follows the long frames.
pub fn sample_long_short_split(m: usize, n: usize, rng: &mut impl Rng) -> Result<(usize, Range<usize>)> {
    if n == 0 || n > m {
        return Err(Error::Invalid(format!("split needs 1 <= n <= m, got n={n} m={m}")));
    }
    let k = rng.random_range(0..=m - n);
    Ok((k, k..k + n))
}

/// One training window with everything needed to rebuild its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<F> {
    /// Clean long-term frames, oldest first.
    pub long: Vec<Tensor<F>>,
    /// Clean short-term frames.
    pub x0: Vec<Tensor<F>>,
    /// Noise paired with each short-term frame.
    pub x1: Vec<Tensor<F>>,
    /// Model input of each short-term frame: `x0` for clean context, the interpolant otherwise.
    pub xt: Vec<Tensor<F>>,
    pub timesteps: TimestepAssignment,
    /// One action per frame, long-term frames first.
    pub actions: Option<Vec<usize>>,
    pub class: Option<usize>,
    pub null_cond: bool,
}

impl<F: Scalar> TrainSample<F> {
    /// Deterministic construction from explicit ingredients.
    pub fn build(
        long: Vec<Tensor<F>>,
        x0: Vec<Tensor<F>>,
        x1: Vec<Tensor<F>>,
        t: Vec<f64>,
        actions: Option<Vec<usize>>,
    ) -> Result<Self> {
        if x0.len() != x1.len() || x0.len() != t.len() {
            return Err(Error::shape("train sample", &[x0.len(), x1.len()], &[t.len()]));
        }
        if let Some(a) = &actions {
            if a.len() != long.len() + x0.len() {
                return Err(Error::shape("train actions", &[a.len()], &[long.len() + x0.len()]));
            }
        }
        let timesteps = TimestepAssignment::new(t)?;
        let xt = x0
            .iter()
            .zip(&x1)
            .zip(timesteps.t())
            .map(|((a, b), &t)| if is_sentinel(t) { Ok(a.clone()) } else { interpolate(a, b, t) })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSample {
            long,
            x0,
            x1,
            xt,
            timesteps,
            actions,
            class: None,
            null_cond: false,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.long.len() + self.x0.len()
    }

    /// Model input plus the `[rows, short_width]` velocity target of the predicted frames.
    pub fn to_input(&self, cfg: &ModelConfig, policy: AttentionPolicy) -> Result<(ForwardInput<F>, Option<Tensor<F>>)> {
        let mut frames = Vec::with_capacity(self.num_frames());
        let action = |i: usize| self.actions.as_ref().map(|a| a[i]);
        for (i, f) in self.long.iter().enumerate() {
            frames.push(FrameInput {
                index: i,
                tier: Tier::Long,
                tokens: patchify(f, cfg.long_kernel)?,
                t: SENTINEL_CLEAN,
                action: action(i),
                predict: false,
            });
        }
        let mut targets = Vec::new();
        for (j, x) in self.xt.iter().enumerate() {
            let i = self.long.len() + j;
            let t = self.timesteps.t()[j];
            let predict = self.timesteps.loss_mask()[j];
            if predict {
                targets.push(patchify(&velocity_target(&self.x0[j], &self.x1[j])?, cfg.short_kernel)?);
            }
            frames.push(FrameInput {
                index: i,
                tier: Tier::Short,
                tokens: patchify(x, cfg.short_kernel)?,
                t,
                action: action(i),
                predict,
            });
        }
        let target = if targets.is_empty() {
            None
        } else {
            let refs: Vec<&Tensor<F>> = targets.iter().collect();
            Some(Tensor::concat_rows(&refs)?)
        };
        Ok((
            ForwardInput {
                frames,
                class: self.class,
                null_cond: self.null_cond,
                policy,
            },
            target,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<F> {
    pub samples: Vec<TrainSample<F>>,
    pub policy: AttentionPolicy,
}

impl<F: Scalar> TrainBatch<F> {
    /// Number of scalars that enter the loss.
    pub fn loss_elements(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| s.x0.iter().zip(s.timesteps.loss_mask()))
            .filter(|(_, &m)| m)
            .map(|(x, _)| x.len())
            .sum()
    }
}

fn draw_clean_mask(frames: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if p >= 1.0 {
        return Err(Error::NoLossFrames);
    }
    loop {
        let mask: Vec<bool> = (0..frames).map(|_| rng.random::<f64>() < p).collect();
        if mask.iter().any(|&c| !c) {
            return Ok(mask);
        }
    }
}

/// One sample per video: window placement, per-frame timesteps, clean-context
/// replacement, noise and condition dropout all drawn from `rng`.
pub fn assemble_batch<F: Scalar>(
    videos: &[&Video<F>],
    window: &TrainWindowConfig,
    model: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<TrainBatch<F>> {
    window.validate()?;
    let mut samples = Vec::with_capacity(videos.len());
    for v in videos {
        if v.is_empty() {
            return Err(Error::Invalid("video has no frames".into()));
        }
        let m = window.m.min(v.len());
        let n = window.n.min(m);
        let k_long = if model.tiers_enabled {
            sample_long_short_split(m, n, rng)?.0
        } else {
            0
        };
        let short = if model.tiers_enabled { n } else { m };
        let used = k_long + short;
        let start = rng.random_range(0..=v.len() - used);
        let long = v.frames[start..start + k_long].to_vec();
        let x0 = v.frames[start + k_long..start + used].to_vec();
        let clean = draw_clean_mask(short, window.scc_fraction, rng)?;
        let t = clean
            .iter()
            .map(|&c| if c { SENTINEL_CLEAN } else { window.sampler.draw(rng) })
            .collect();
        let shape = x0[0].shape().to_vec();
        let x1 = (0..short).map(|_| Tensor::randn(&shape, 1.0, rng)).collect();
        let actions = v.actions.as_ref().map(|a| a[start..start + used].to_vec());
        let mut s = TrainSample::build(long, x0, x1, t, actions)?;
        s.class = v.class;
        s.null_cond = rng.random::<f64>() < window.cfg_drop;
        samples.push(s);
    }
    Ok(TrainBatch {
        samples,
        policy: AttentionPolicy::FrameCausal,
    })
}

/// The video-diffusion comparison: every frame noised at one shared timestep,
/// full attention, no clean context.
pub fn video_dit_mode<F: Scalar>(batch: &TrainBatch<F>) -> Result<TrainBatch<F>> {
    let samples = batch
        .samples
        .iter()
        .map(|s| {
            if !s.long.is_empty() {
                return Err(Error::Invalid("video-DiT mode has no long-term context".into()));
            }
            let t = s
                .timesteps
                .t()
                .iter()
                .copied()
                .find(|&t| !is_sentinel(t))
                .ok_or(Error::NoLossFrames)?;
            let mut out = TrainSample::build(
                Vec::new(),
                s.x0.clone(),
                s.x1.clone(),
                vec![t; s.x0.len()],
                s.actions.clone(),
            )?;
            out.class = s.class;
            out.null_cond = s.null_cond;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainBatch {
        samples,
        policy: AttentionPolicy::Full,
    })
}

/// Sum of squared velocity errors of one sample, as a graph node.
pub fn sample_sse<F: Scalar>(
    model: &FarModel<F>,
    g: &mut Graph<F>,
    sample: &TrainSample<F>,
    policy: AttentionPolicy,
) -> Result<Option<Var>> {
    let (input, target) = sample.to_input(model.config(), policy)?;
    let out = model.forward(g, &input, None, false)?;
    match (out.pred, target) {
        (Some(pred), Some(target)) => {
            let target = g.constant(target);
            let diff = g.sub(pred, target)?;
            Ok(Some(g.sum_squares(diff)))
        }
        _ => Ok(None),
    }
}

/// Batch flow-matching loss without gradients.
pub fn batch_loss<F: Scalar>(model: &FarModel<F>, batch: &TrainBatch<F>) -> Result<f64> {
    let total = batch.loss_elements();
    if total == 0 {
        return Err(Error::NoLossFrames);
    }
    let sse = par::map_slice(model.execution(), &batch.samples, |s| -> Result<f64> {
        let mut g = Graph::new();
        Ok(sample_sse(model, &mut g, s, batch.policy)?.map_or(0.0, |v| g.scalar_value(v).as_f64()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(sse.iter().sum::<f64>() / total as f64)
}

/// Loss and parameter gradients, with per-sample graphs run data-parallel and
/// gradients summed in sample order.
pub fn loss_and_grads<F: Scalar>(model: &FarModel<F>, batch: &TrainBatch<F>) -> Result<(f64, Vec<Tensor<F>>)> {
    let total = batch.loss_elements();
    if total == 0 {
        return Err(Error::NoLossFrames);
    }
    let inv = F::of(1.0 / total as f64);
    let parts = par::map_slice(model.execution(), &batch.samples, |s| -> Result<Option<(f64, Vec<Tensor<F>>)>> {
        let mut g = Graph::new();
        let Some(sse) = sample_sse(model, &mut g, s, batch.policy)? else {
            return Ok(None);
        };
        let value = g.scalar_value(sse).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("sample loss {value}")));
        }
        let scaled = g.scale(sse, inv);
        g.backward(scaled)?;
        Ok(Some((value, g.param_grads(model.params()))))
    });
    let mut sse = 0.0;
    let mut grads = model.params().zeros_like();
    for part in parts {
        if let Some((v, gs)) = part? {
            sse += v;
            for (acc, g) in grads.iter_mut().zip(&gs) {
                acc.accumulate(g)?;
            }
        }
    }
    Ok((sse / total as f64, grads))
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[grads.len()], &[self.m.len()]));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64() * scale;
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = F::of(mn);
                *v = F::of(vn);
                let upd = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = F::of(p.as_f64() - upd);
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer update on `batch`.
pub fn train_step<F: Scalar>(
    model: &mut FarModel<F>,
    batch: &TrainBatch<F>,
    opt: &mut Adam<F>,
    lr: f64,
) -> Result<StepReport> {
    let (loss, grads) = loss_and_grads(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {} over {} samples",
            opt.steps_taken() + 1,
            batch.samples.len()
        )));
    }
    let grad_norm = opt.step(model.params_mut(), &grads, lr)?;
    Ok(StepReport { loss, grad_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Far,
    VideoDit,
}

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at the end of warmup down to zero at `steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub window: TrainWindowConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::tiny(),
            window: TrainWindowConfig::new(16, 16),
            batch_size: 4,
            steps: 1000,
            lr: 1e-4,
            warmup: 0,
            schedule: LrSchedule::Constant,
            grad_clip: None,
            seed: 0,
            mode: TrainMode::Far,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
                let frac = ((step - self.warmup) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.window.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Range(format!("learning rate {}", self.lr)));
        }
        if self.mode == TrainMode::VideoDit && self.model.tiers_enabled {
            return Err(Error::Invalid("video-DiT mode trains short-term frames only".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,lr,wallclock";

/// Runs `cfg.steps` updates. Batches are assembled on a producer thread into a
/// bounded queue from a single seeded stream, so runs are reproducible.
/// Each step appends `step,loss,lr,wallclock` to `log` when given.
pub fn train<F: Scalar>(
    model: &mut FarModel<F>,
    videos: &[Video<F>],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Invalid("no training videos".into()));
    }
    if model.config() != &cfg.model {
        return Err(Error::Invalid("model does not match the training config".into()));
    }
    let io = |e: std::io::Error| Error::io("train_log", e);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}").map_err(io)?;
    }
    let mut opt = Adam::new(model.params());
    opt.clip = cfg.grad_clip;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<TrainBatch<F>>>(4);
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for _ in 0..cfg.steps {
                let picks: Vec<&Video<F>> = (0..cfg.batch_size)
                    .map(|_| &videos[rng.random_range(0..videos.len())])
                    .collect();
                let batch = assemble_batch(&picks, &cfg.window, &cfg.model, &mut rng).and_then(|b| match cfg.mode {
                    TrainMode::Far => Ok(b),
                    TrainMode::VideoDit => video_dit_mode(&b),
                });
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in 0..cfg.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Invalid("batch producer stopped early".into()))??;
            let lr = cfg.lr_at(step);
            let report = train_step(model, &batch, &mut opt, lr)?;
            losses.push(report.loss);
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{},{},{},{:.6}", step + 1, report.loss, lr, start.elapsed().as_secs_f64()).map_err(io)?;
            }
        }
        Ok(())
    })?;
    Ok(TrainSummary {
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::LatentDims;

    fn small_cfg(tiers: bool) -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 32,
            mlp: 64,
            heads: 2,
            latent: LatentDims::new(4, 4, 2),
            short_kernel: crate::tokenizer::Kernel::square(2),
            long_kernel: crate::tokenizer::Kernel::square(4),
            ..ModelConfig::tiny()
        }
        .with_tiers(tiers)
    }

    fn videos(cfg: &ModelConfig, count: usize, len: usize, seed: u64) -> Vec<Video<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Video {
                frames: (0..len).map(|_| Tensor::randn(&cfg.latent.shape(), 1.0, &mut rng)).collect(),
                actions: Some((0..len).map(|i| i % cfg.num_actions).collect()),
                class: None,
            })
            .collect()
    }

    #[test]
    fn scc_zero_keeps_every_frame_in_the_loss() {
        let cfg = small_cfg(false);
        let vs = videos(&cfg, 3, 6, 0);
        let refs: Vec<&Video<f64>> = vs.iter().collect();
        let mut w = TrainWindowConfig::new(6, 6);
        w.scc_fraction = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = assemble_batch(&refs, &w, &cfg, &mut rng).unwrap();
        for s in &b.samples {
            assert_eq!(s.timesteps.num_clean(), 0);
            assert!(s.timesteps.t().iter().all(|&t| t > 0.0 && t < 1.0));
        }
    }

    #[test]
    fn scc_one_is_rejected() {
        let cfg = small_cfg(false);
        let vs = videos(&cfg, 1, 4, 0);
        let mut w = TrainWindowConfig::new(4, 4);
        w.scc_fraction = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            assemble_batch(&[&vs[0]], &w, &cfg, &mut rng),
            Err(Error::NoLossFrames)
        ));
    }

    #[test]
    fn forced_clean_frame() {
        let cfg = small_cfg(false);
        let v = &videos(&cfg, 1, 4, 3)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x1: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&cfg.latent.shape(), 1.0, &mut rng)).collect();
        let s = TrainSample::build(Vec::new(), v.frames.clone(), x1.clone(), vec![-1.0, 0.2, 0.5, 0.9], None).unwrap();
        assert_eq!(s.timesteps.loss_mask(), &[false, true, true, true]);
        assert_eq!(s.xt[0], v.frames[0]);
        for j in 1..4 {
            let t = s.timesteps.t()[j];
            assert_eq!(s.xt[j], interpolate(&v.frames[j], &x1[j], t).unwrap());
        }
    }

    #[test]
    fn sentinel_fraction_matches_bernoulli_rate() {
        let cfg = small_cfg(false);
        let vs = videos(&cfg, 4, 8, 0);
        let refs: Vec<&Video<f64>> = vs.iter().collect();
        let mut w = TrainWindowConfig::new(8, 8);
        w.scc_fraction = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut clean, mut total) = (0usize, 0usize);
        for _ in 0..400 {
            let b = assemble_batch(&refs, &w, &cfg, &mut rng).unwrap();
            for s in &b.samples {
                clean += s.timesteps.num_clean();
                total += s.timesteps.len();
                for (j, &t) in s.timesteps.t().iter().enumerate() {
                    if is_sentinel(t) {
                        assert_eq!(s.xt[j], s.x0[j]);
                    }
                }
            }
        }
        let p = 0.1;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        let rate = clean as f64 / total as f64;
        // Resampling all-clean windows shifts the rate by less than 1e-7 at n=8.
        assert!((rate - p).abs() <= 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn split_collapses_when_m_equals_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_long_short_split(16, 16, &mut rng).unwrap(), (0, 0..16));
        }
        assert!(sample_long_short_split(3, 4, &mut rng).is_err());
    }

    #[test]
    fn split_is_uniform() {
        let (m, n) = (300usize, 16usize);
        let bins = m - n + 1;
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let (k, w) = sample_long_short_split(m, n, &mut rng).unwrap();
            assert!(k <= m - n);
            assert_eq!(w, k..k + n);
            counts[k] += 1;
        }
        let e = draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 284 degrees of freedom; the 0.999 quantile is about 373.
        assert!(chi2 < 373.0, "chi2 {chi2}");
    }

    #[test]
    fn long_frames_in_layout() {
        let cfg = small_cfg(true);
        let v = &videos(&cfg, 1, 5, 1)[0];
        let x1 = v.frames[2..].to_vec();
        let s = TrainSample::build(v.frames[..2].to_vec(), v.frames[2..].to_vec(), x1, vec![0.3; 3], None).unwrap();
        let (input, target) = s.to_input(&cfg, AttentionPolicy::FrameCausal).unwrap();
        let tokens: usize = input.frames.iter().map(|f| f.tokens.rows()).sum();
        assert_eq!(tokens, 2 * cfg.tpf_long() + 3 * cfg.tpf_short());
        assert_eq!(target.unwrap().rows(), 3 * cfg.tpf_short());
        assert!(input.frames[..2].iter().all(|f| f.tier == Tier::Long && is_sentinel(f.t)));
    }

    #[test]
    fn zero_head_initial_loss_is_noise_energy() {
        // x0 ≡ 0, so v* = x1 and the zero-initialized head gives loss ≈ E|x1|² = 1 per element.
        let cfg = small_cfg(false);
        let model = FarModel::<f64>::new(cfg.clone(), 0).unwrap();
        let zeros = Video::new(vec![Tensor::zeros(&cfg.latent.shape()); 4]);
        let refs = vec![&zeros; 64];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = assemble_batch(&refs, &TrainWindowConfig::new(4, 4), &cfg, &mut rng).unwrap();
        let loss = batch_loss(&model, &b).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
        let (l2, _) = loss_and_grads(&model, &b).unwrap();
        assert!((loss - l2).abs() < 1e-12);
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let cfg = small_cfg(false);
        let mut model = FarModel::<f64>::new(cfg.clone(), 1).unwrap();
        let vs = videos(&cfg, 2, 4, 2);
        let refs: Vec<&Video<f64>> = vs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = assemble_batch(&refs, &TrainWindowConfig::new(4, 4), &cfg, &mut rng).unwrap();
        let mut opt = Adam::new(model.params());
        let losses: Vec<f64> = (0..200)
            .map(|_| train_step(&mut model, &b, &mut opt, 1e-3).unwrap().loss)
            .collect();
        let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let windows: Vec<f64> = losses.chunks(20).map(smooth).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    #[test]
    fn no_gradient_reaches_clean_or_long_readouts() {
        let cfg = small_cfg(true);
        let model = {
            let mut m = FarModel::<f64>::new(cfg.clone(), 2).unwrap();
            m.randomize(0.2, 3);
            m
        };
        let v = &videos(&cfg, 1, 5, 4)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x1: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&cfg.latent.shape(), 1.0, &mut rng)).collect();
        let base = TrainSample::build(
            v.frames[..2].to_vec(),
            v.frames[2..].to_vec(),
            x1.clone(),
            vec![-1.0, 0.4, -1.0],
            None,
        )
        .unwrap();
        let batch = TrainBatch {
            samples: vec![base.clone()],
            policy: AttentionPolicy::FrameCausal,
        };
        let l0 = batch_loss(&model, &batch).unwrap();
        // Frame 4 is clean and last: nothing later reads it, and its own error is masked.
        let mut changed = base.clone();
        changed.x0[2] = changed.x0[2].scale(3.0);
        changed.xt[2] = changed.x0[2].clone();
        let l1 = batch_loss(
            &model,
            &TrainBatch {
                samples: vec![changed],
                policy: AttentionPolicy::FrameCausal,
            },
        )
        .unwrap();
        assert_eq!(l0, l1);
        // Only frame 3 is read out.
        assert_eq!(batch.loss_elements(), cfg.latent.frame_len());
    }

    #[test]
    fn video_dit_batches() {
        let cfg = small_cfg(false);
        let vs = videos(&cfg, 2, 4, 7);
        let refs: Vec<&Video<f64>> = vs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = TrainWindowConfig::new(4, 4);
        w.scc_fraction = 0.5;
        let b = assemble_batch(&refs, &w, &cfg, &mut rng).unwrap();
        let d = video_dit_mode(&b).unwrap();
        assert_eq!(d.policy, AttentionPolicy::Full);
        for s in &d.samples {
            assert!(s.timesteps.t().windows(2).all(|p| p[0] == p[1]));
            assert_eq!(s.timesteps.num_clean(), 0);
        }
        // A single frame is the same batch in either mode.
        let one: Vec<Video<f64>> = vs.iter().map(|v| Video::new(v.frames[..1].to_vec())).collect();
        let refs: Vec<&Video<f64>> = one.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let far = assemble_batch(&refs, &TrainWindowConfig::new(4, 4), &cfg, &mut rng).unwrap();
        let dit = video_dit_mode(&far).unwrap();
        assert_eq!(far.samples, dit.samples);
        let fm = crate::masking::frame_mask(&[0; 4], &[0; 4], far.policy);
        let dm = crate::masking::frame_mask(&[0; 4], &[0; 4], dit.policy);
        assert_eq!(fm, dm);
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let cfg = TrainConfig {
            model: small_cfg(false),
            window: TrainWindowConfig::new(3, 3),
            batch_size: 2,
            steps: 5,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let vs = videos(&cfg.model, 3, 4, 1);
        let run = |exec| {
            let mut m = FarModel::<f64>::new(cfg.model.clone(), 0).unwrap().with_execution(exec);
            let mut buf = Vec::new();
            let s = train(&mut m, &vs, &cfg, Some(&mut buf)).unwrap();
            (s.losses, buf, m.params().clone())
        };
        let (la, log, pa) = run(Execution::Parallel);
        let (lb, _, pb) = run(Execution::Sequential);
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRAIN_LOG_HEADER);
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn learning_rate_schedules() {
        let mut cfg = TrainConfig {
            steps: 110,
            lr: 2.0,
            warmup: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.2);
        assert_eq!(cfg.lr_at(9), 2.0);
        assert_eq!(cfg.lr_at(50), 2.0);
        cfg.schedule = LrSchedule::Cosine;
        assert_eq!(cfg.lr_at(10), 2.0);
        assert!((cfg.lr_at(60) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(109) < 1e-3);
        assert!((11..110).all(|s| cfg.lr_at(s) < cfg.lr_at(s - 1)));
    }
}

//! The frame-autoregressive transformer.
//!
//! Tokens of each frame are embedded through a per-tier projection plus a
//! learned spatial table and a sinusoidal temporal code. Every frame carries
//! its own conditioning vector (timestep or the clean-context row, class,
//! action) that drives adaLN scale/shift/gate inside each block, so frames
//! with different noise levels coexist in one sequence. Attention is
//! frame-causal; past frames can be supplied as cached keys/values instead of
//! tokens.

mod checkpoint;
mod config;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModelConfig, REFERENCE_LATENT};

use crate::error::{Error, Result};
use crate::masking::{frame_mask, AttentionPolicy};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::par::Execution;
use crate::schedule::is_sentinel;
use crate::tokenizer::{unpatchify, Tier};

/// One frame of model input.
#[derive(Debug, Clone)]
pub struct FrameInput<F> {
    /// Absolute frame index; drives the temporal code and the causal mask.
    pub index: usize,
    pub tier: Tier,
    /// Patchified with the tier's kernel.
    pub tokens: Tensor<F>,
    /// Scheduler time in `[0, 1]` or the clean sentinel.
    pub t: f64,
    pub action: Option<usize>,
    /// Whether a velocity is read out for this frame.
    pub predict: bool,
}

/// A forward request: frames in temporal order plus sequence-level conditioning.
#[derive(Debug, Clone)]
pub struct ForwardInput<F> {
    pub frames: Vec<FrameInput<F>>,
    pub class: Option<usize>,
    /// Replaces class and action embeddings with their null rows.
    pub null_cond: bool,
    pub policy: AttentionPolicy,
}

impl<F> ForwardInput<F> {
    pub fn new(frames: Vec<FrameInput<F>>) -> Self {
        ForwardInput {
            frames,
            class: None,
            null_cond: false,
            policy: AttentionPolicy::FrameCausal,
        }
    }
}

/// Keys and values of already-encoded frames, per layer, for tokens in
/// temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct PastKv<F> {
    pub frame_index: Vec<usize>,
    pub layers: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> PastKv<F> {
    pub fn len(&self) -> usize {
        self.frame_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index.is_empty()
    }

    /// `self` followed by `other`, layer by layer.
    pub fn concat(parts: &[&PastKv<F>]) -> Result<Option<PastKv<F>>> {
        let parts: Vec<&PastKv<F>> = parts.iter().copied().filter(|p| !p.is_empty()).collect();
        let Some(first) = parts.first() else {
            return Ok(None);
        };
        let layers = (0..first.layers.len())
            .map(|l| {
                let ks: Vec<&Tensor<F>> = parts.iter().map(|p| &p.layers[l].0).collect();
                let vs: Vec<&Tensor<F>> = parts.iter().map(|p| &p.layers[l].1).collect();
                Ok((Tensor::concat_rows(&ks)?, Tensor::concat_rows(&vs)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(PastKv {
            frame_index: parts.iter().flat_map(|p| p.frame_index.iter().copied()).collect(),
            layers,
        }))
    }
}

/// Graph handles produced by [`FarModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[rows, short_width]` velocity tokens for predicted frames, in frame order.
    pub pred: Option<Var>,
    /// Positions (into the input frame list) of the predicted frames.
    pub pred_frames: Vec<usize>,
    /// Per-layer `(K, V)` of the input tokens, when captured.
    pub kv: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ada_w: ParamId,
    ada_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    short_w: ParamId,
    short_b: ParamId,
    short_pos: ParamId,
    long: Option<(ParamId, ParamId, ParamId)>,
    t_w1: ParamId,
    t_b1: ParamId,
    t_w2: ParamId,
    t_b2: ParamId,
    t_clean: ParamId,
    class: Option<ParamId>,
    action: Option<ParamId>,
    blocks: Vec<BlockIds>,
    final_w: ParamId,
    final_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Ids {
    fn resolve<F: Scalar>(cfg: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        let shapes = cfg.param_shapes();
        if shapes.len() != store.len() {
            return Err(Error::Invalid(format!(
                "parameter count {} does not match config ({})",
                store.len(),
                shapes.len()
            )));
        }
        for (name, shape) in &shapes {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape("parameter", store.get(id).shape(), shape));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| id(&format!("blocks.{l}.{s}"));
                BlockIds {
                    ada_w: p("ada.w"),
                    ada_b: p("ada.b"),
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    w1: p("mlp.w1"),
                    b1: p("mlp.b1"),
                    w2: p("mlp.w2"),
                    b2: p("mlp.b2"),
                }
            })
            .collect();
        Ok(Ids {
            short_w: id("embed.short.w"),
            short_b: id("embed.short.b"),
            short_pos: id("pos.short"),
            long: cfg
                .tiers_enabled
                .then(|| (id("embed.long.w"), id("embed.long.b"), id("pos.long"))),
            t_w1: id("t_embed.w1"),
            t_b1: id("t_embed.b1"),
            t_w2: id("t_embed.w2"),
            t_b2: id("t_embed.b2"),
            t_clean: id("t_embed.clean"),
            class: (cfg.num_classes > 0).then(|| id("class_embed")),
            action: (cfg.num_actions > 0).then(|| id("action_embed")),
            blocks,
            final_w: id("final.ada.w"),
            final_b: id("final.ada.b"),
            head_w: id("head.w"),
            head_b: id("head.b"),
        })
    }
}

/// `[cos(p·ω_i)…, sin(p·ω_i)…]` with `ω_i = 10000^(-i/half)`.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let (mut c, mut s): (Vec<f64>, Vec<f64>) =
        freqs.map(|w| ((pos * w).cos(), (pos * w).sin())).unzip();
    c.append(&mut s);
    c
}

/// Row-major `[gh·gw, dim]` table: row code in the first half, column code in the second.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        for c in 0..gw {
            for (p, n) in [(r, half), (c, dim - half)] {
                let mut code = sinusoidal(p as f64, n);
                code.resize(n, 0.0);
                out.extend(code);
            }
        }
    }
    out
}

/// Timesteps are scaled before the sinusoidal code so `[0, 1]` spans many periods.
const TIME_SCALE: f64 = 1000.0;

fn zero_init(name: &str) -> bool {
    name.contains(".ada.") || name.starts_with("head.")
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    last.starts_with('b') && last.len() <= 2
}

#[derive(Debug, Clone)]
pub struct FarModel<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    ids: Ids,
    exec: Execution,
}

impl<F: Scalar> FarModel<F> {
    /// Fresh model: Xavier-uniform projections, 2D sin-cos spatial tables, small-normal
    /// embeddings, zero biases, and zero adaLN and output head so every block starts
    /// as the identity and the initial velocity prediction is exactly zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if zero_init(&name) || is_bias(&name) {
                Tensor::zeros(&shape)
            } else if let Some(k) = match name.as_str() {
                "pos.short" => Some(config.short_kernel),
                "pos.long" => Some(config.long_kernel),
                _ => None,
            } {
                let (gh, gw) = (config.latent.h / k.h, config.latent.w / k.w);
                Tensor::new(shape.clone(), sincos_2d(gh, gw, shape[1]).into_iter().map(F::of).collect())?
            } else if name.ends_with("_embed")
                || name.starts_with("t_embed.")
            {
                Tensor::randn(&shape, 0.02, &mut rng)
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(&shape, |_| F::of(rng.random_range(-a..a)))
            };
            params.add(name, t);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let ids = Ids::resolve(&config, &params)?;
        Ok(FarModel {
            config,
            params,
            ids,
            exec: Execution::default(),
        })
    }

    /// Overwrites every parameter with `N(0, std²)` draws. Used to exercise
    /// code paths that the zero initialization would short-circuit.
    pub fn randomize(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.params.tensors_mut() {
            *t = Tensor::randn(t.shape(), std, &mut rng);
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> FarModel<G> {
        FarModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            exec: self.exec,
        }
    }

    fn check_input(&self, input: &ForwardInput<F>, past: Option<&PastKv<F>>) -> Result<()> {
        let cfg = &self.config;
        if input.frames.is_empty() {
            return Err(Error::Invalid("forward needs at least one frame".into()));
        }
        for f in &input.frames {
            let (width, tpf) = match f.tier {
                Tier::Short => (cfg.short_width(), cfg.tpf_short()),
                Tier::Long => {
                    if !cfg.tiers_enabled {
                        return Err(Error::Invalid(
                            "long-term tokens need a model with tiers enabled".into(),
                        ));
                    }
                    (cfg.long_width(), cfg.tpf_long())
                }
            };
            if f.tokens.shape() != [tpf, width] {
                return Err(Error::shape("frame tokens", f.tokens.shape(), &[tpf, width]));
            }
            if f.index >= cfg.max_frames {
                return Err(Error::Range(format!(
                    "frame index {} beyond max_frames {}",
                    f.index, cfg.max_frames
                )));
            }
            if f.predict && (f.tier == Tier::Long || is_sentinel(f.t)) {
                return Err(Error::Invalid(
                    "only noised short-term frames can be predicted".into(),
                ));
            }
            if !is_sentinel(f.t) && !(0.0..=1.0).contains(&f.t) {
                return Err(Error::Range(format!("timestep {} outside [0,1]", f.t)));
            }
            if let Some(a) = f.action {
                if a >= cfg.num_actions {
                    return Err(Error::Range(format!("action {a} of {}", cfg.num_actions)));
                }
            }
        }
        if let Some(c) = input.class {
            if c >= cfg.num_classes {
                return Err(Error::Range(format!("class {c} of {}", cfg.num_classes)));
            }
        }
        if let Some(p) = past {
            if p.layers.len() != cfg.layers {
                return Err(Error::Cache(format!(
                    "cache has {} layers, model has {}",
                    p.layers.len(),
                    cfg.layers
                )));
            }
            let first = input.frames[0].index;
            if p.frame_index.last().is_some_and(|&l| l >= first) {
                return Err(Error::Cache("cached frames must precede the input".into()));
            }
        }
        Ok(())
    }

    /// Builds the forward pass on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        input: &ForwardInput<F>,
        past: Option<&PastKv<F>>,
        capture_kv: bool,
    ) -> Result<ForwardOutput> {
        self.check_input(input, past)?;
        let cfg = &self.config;
        let p = &self.params;
        let ids = &self.ids;
        let d = cfg.hidden;

        let (mut x, token_frame, token_index) = self.embed(g, &input.frames)?;

        // per-frame conditioning
        let cond = self.conditioning(g, input)?;
        let cond = g.silu(cond);

        // attention mask over [past tokens, input tokens]
        let mut key_frames: Vec<usize> = past.map(|p| p.frame_index.clone()).unwrap_or_default();
        key_frames.extend_from_slice(&token_index);
        let mask = Arc::new(frame_mask(&token_index, &key_frames, input.policy).data);

        let one = F::one();
        let mut kv = Vec::new();
        for (l, b) in ids.blocks.iter().enumerate() {
            let (aw, ab) = (g.param(p, b.ada_w), g.param(p, b.ada_b));
            let ada = g.linear(cond, aw, ab)?;
            let mut m = Vec::with_capacity(6);
            for c in 0..6 {
                let s = g.slice_cols(ada, c * d, (c + 1) * d)?;
                m.push(g.gather_rows(s, token_frame.clone())?);
            }
            let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

            let h = self.modulated_norm(g, x, shift1, scale1, one)?;
            let (wq, bq) = (g.param(p, b.wq), g.param(p, b.bq));
            let (wk, bk) = (g.param(p, b.wk), g.param(p, b.bk));
            let (wv, bv) = (g.param(p, b.wv), g.param(p, b.bv));
            let q = g.linear(h, wq, bq)?;
            let k = g.linear(h, wk, bk)?;
            let v = g.linear(h, wv, bv)?;
            if capture_kv {
                kv.push((k, v));
            }
            let (k_all, v_all) = match past {
                Some(pk) if !pk.is_empty() => {
                    let kc = g.constant(pk.layers[l].0.clone());
                    let vc = g.constant(pk.layers[l].1.clone());
                    (g.concat_rows(&[kc, k])?, g.concat_rows(&[vc, v])?)
                }
                _ => (k, v),
            };
            let a = g.attention(q, k_all, v_all, mask.clone(), cfg.heads)?;
            let (wo, bo) = (g.param(p, b.wo), g.param(p, b.bo));
            let a = g.linear(a, wo, bo)?;
            let a = g.mul(gate1, a)?;
            x = g.add(x, a)?;

            let h = self.modulated_norm(g, x, shift2, scale2, one)?;
            let (w1, b1) = (g.param(p, b.w1), g.param(p, b.b1));
            let (w2, b2) = (g.param(p, b.w2), g.param(p, b.b2));
            let h = g.linear(h, w1, b1)?;
            let h = g.gelu(h);
            let h = g.linear(h, w2, b2)?;
            let h = g.mul(gate2, h)?;
            x = g.add(x, h)?;
        }

        let pred_frames: Vec<usize> = input
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.predict)
            .map(|(i, _)| i)
            .collect();
        let pred = if pred_frames.is_empty() {
            None
        } else {
            let rows: Vec<usize> = (0..token_frame.len())
                .filter(|&r| input.frames[token_frame[r]].predict)
                .collect();
            let row_frames: Vec<usize> = rows.iter().map(|&r| token_frame[r]).collect();
            let xs = g.gather_rows(x, rows)?;
            let (fw, fb) = (g.param(p, ids.final_w), g.param(p, ids.final_b));
            let fa = g.linear(cond, fw, fb)?;
            let shift = g.slice_cols(fa, 0, d)?;
            let shift = g.gather_rows(shift, row_frames.clone())?;
            let scale = g.slice_cols(fa, d, 2 * d)?;
            let scale = g.gather_rows(scale, row_frames)?;
            let h = self.modulated_norm(g, xs, shift, scale, one)?;
            let (hw, hb) = (g.param(p, ids.head_w), g.param(p, ids.head_b));
            Some(g.linear(h, hw, hb)?)
        };
        Ok(ForwardOutput {
            pred,
            pred_frames,
            kv,
        })
    }

    /// `[tokens, D]` input embeddings: per-tier projection, spatial table and
    /// temporal code, plus the frame slot and absolute index of every token.
    fn embed(&self, g: &mut Graph<F>, frames: &[FrameInput<F>]) -> Result<(Var, Vec<usize>, Vec<usize>)> {
        let cfg = &self.config;
        let p = &self.params;
        let ids = &self.ids;
        let d = cfg.hidden;
        // token bookkeeping
        let mut token_frame = Vec::new(); // frame-local index of every token
        let mut token_index = Vec::new(); // absolute frame index of every token
        let mut short_rows = Vec::new();
        let mut long_rows = Vec::new();
        let mut short_pos = Vec::new();
        let mut long_pos = Vec::new();
        let mut order = Vec::new(); // (tier, row within that tier's stack)
        for (fi, f) in frames.iter().enumerate() {
            for r in 0..f.tokens.rows() {
                token_frame.push(fi);
                token_index.push(f.index);
                match f.tier {
                    Tier::Short => {
                        order.push((Tier::Short, short_pos.len()));
                        short_pos.push(r);
                    }
                    Tier::Long => {
                        order.push((Tier::Long, long_pos.len()));
                        long_pos.push(r);
                    }
                }
            }
            match f.tier {
                Tier::Short => short_rows.push(&f.tokens),
                Tier::Long => long_rows.push(&f.tokens),
            }
        }
        let n_short = short_pos.len();

        // input embedding
        let mut parts = Vec::new();
        if !short_rows.is_empty() {
            let x = g.constant(Tensor::concat_rows(&short_rows)?);
            let (w, b, pos) = (
                g.param(p, ids.short_w),
                g.param(p, ids.short_b),
                g.param(p, ids.short_pos),
            );
            let e = g.linear(x, w, b)?;
            let pe = g.gather_rows(pos, short_pos)?;
            parts.push(g.add(e, pe)?);
        }
        if !long_rows.is_empty() {
            let (wl, bl, posl) = ids.long.expect("checked by check_input");
            let x = g.constant(Tensor::concat_rows(&long_rows)?);
            let (w, b, pos) = (g.param(p, wl), g.param(p, bl), g.param(p, posl));
            let e = g.linear(x, w, b)?;
            let pe = g.gather_rows(pos, long_pos)?;
            parts.push(g.add(e, pe)?);
        }
        let stacked = g.concat_rows(&parts)?;
        let x = if long_rows.is_empty() {
            stacked
        } else {
            let perm = order
                .iter()
                .map(|&(tier, row)| match tier {
                    Tier::Short => row,
                    Tier::Long => n_short + row,
                })
                .collect();
            g.gather_rows(stacked, perm)?
        };
        let mut temporal = Vec::with_capacity(token_index.len() * d);
        for &fi in &token_index {
            temporal.extend(sinusoidal(fi as f64, d).into_iter().map(F::of));
        }
        let temporal = g.constant(Tensor::new(vec![token_index.len(), d], temporal)?);
        let x = g.add(x, temporal)?;
        Ok((x, token_frame, token_index))

    }

    /// Evaluated input embeddings of `frames`.
    pub fn embed_tokens(&self, frames: &[FrameInput<F>]) -> Result<Tensor<F>> {
        self.check_input(&ForwardInput::new(frames.to_vec()), None)?;
        let mut g = Graph::with_execution(self.exec);
        let (x, _, _) = self.embed(&mut g, frames)?;
        Ok(g.value(x).clone())
    }

    /// `[frames, 6D]` adaLN parameters of block `layer` for each input frame,
    /// in the order shift, scale, gate (attention) then shift, scale, gate (MLP).
    pub fn modulation(&self, input: &ForwardInput<F>, layer: usize) -> Result<Tensor<F>> {
        self.check_input(input, None)?;
        let b = self
            .ids
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Range(format!("layer {layer} of {}", self.config.layers)))?;
        let mut g = Graph::with_execution(self.exec);
        let cond = self.conditioning(&mut g, input)?;
        let cond = g.silu(cond);
        let (aw, ab) = (g.param(&self.params, b.ada_w), g.param(&self.params, b.ada_b));
        let ada = g.linear(cond, aw, ab)?;
        Ok(g.value(ada).clone())
    }

    /// `norm(x)·(1 + scale) + shift`.
    fn modulated_norm(&self, g: &mut Graph<F>, x: Var, shift: Var, scale: Var, one: F) -> Result<Var> {
        let h = g.normalize(x, F::of(self.config.ln_eps));
        let s = g.add_scalar(scale, one);
        let h = g.mul(h, s)?;
        g.add(h, shift)
    }

    /// `[frames, D]` conditioning vectors before the SiLU.
    fn conditioning(&self, g: &mut Graph<F>, input: &ForwardInput<F>) -> Result<Var> {
        let cfg = &self.config;
        let p = &self.params;
        let ids = &self.ids;
        let nf = input.frames.len();
        let noised: Vec<f64> = input
            .frames
            .iter()
            .map(|f| f.t)
            .filter(|&t| !is_sentinel(t))
            .collect();
        let clean = g.param(p, ids.t_clean);
        let temb = if noised.is_empty() {
            g.gather_rows(clean, vec![0; nf])?
        } else {
            let mut feats = Vec::with_capacity(noised.len() * cfg.freq_dim);
            for &t in &noised {
                feats.extend(sinusoidal(t * TIME_SCALE, cfg.freq_dim).into_iter().map(F::of));
            }
            let feats = g.constant(Tensor::new(vec![noised.len(), cfg.freq_dim], feats)?);
            let (w1, b1) = (g.param(p, ids.t_w1), g.param(p, ids.t_b1));
            let (w2, b2) = (g.param(p, ids.t_w2), g.param(p, ids.t_b2));
            let h = g.linear(feats, w1, b1)?;
            let h = g.silu(h);
            let h = g.linear(h, w2, b2)?;
            let table = g.concat_rows(&[h, clean])?;
            let mut next = 0;
            let idx = input
                .frames
                .iter()
                .map(|f| {
                    if is_sentinel(f.t) {
                        noised.len()
                    } else {
                        next += 1;
                        next - 1
                    }
                })
                .collect();
            g.gather_rows(table, idx)?
        };
        let mut cond = temb;
        if let Some(cid) = ids.class {
            let null = cfg.num_classes;
            let row = if input.null_cond {
                null
            } else {
                input.class.unwrap_or(null)
            };
            let table = g.param(p, cid);
            let e = g.gather_rows(table, vec![row; nf])?;
            cond = g.add(cond, e)?;
        } else if input.class.is_some() {
            return Err(Error::Invalid("model has no class embedding".into()));
        }
        if let Some(aid) = ids.action {
            let null = cfg.num_actions;
            let rows = input
                .frames
                .iter()
                .map(|f| if input.null_cond { null } else { f.action.unwrap_or(null) })
                .collect();
            let table = g.param(p, aid);
            let e = g.gather_rows(table, rows)?;
            cond = g.add(cond, e)?;
        }
        Ok(cond)
    }

    /// Velocity prediction for every `predict` frame, as `[H, W, d]` tensors.
    pub fn velocity(&self, input: &ForwardInput<F>, past: Option<&PastKv<F>>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::with_execution(self.exec);
        let out = self.forward(&mut g, input, past, false)?;
        let Some(pred) = out.pred else {
            return Ok(Vec::new());
        };
        let tpf = self.config.tpf_short();
        let pv = g.value(pred);
        (0..out.pred_frames.len())
            .map(|i| {
                unpatchify(
                    &pv.slice_rows(i * tpf, (i + 1) * tpf)?,
                    self.config.short_kernel,
                    self.config.latent,
                )
            })
            .collect()
    }

    /// Per-layer keys and values of the input tokens.
    pub fn encode(&self, input: &ForwardInput<F>, past: Option<&PastKv<F>>) -> Result<PastKv<F>> {
        let mut g = Graph::with_execution(self.exec);
        let out = self.forward(&mut g, input, past, true)?;
        let frame_index = input
            .frames
            .iter()
            .flat_map(|f| std::iter::repeat_n(f.index, f.tokens.rows()))
            .collect();
        let layers = out
            .kv
            .iter()
            .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        Ok(PastKv {
            frame_index,
            layers,
        })
    }
}

#[cfg(test)]
mod tests;

//! Pixel metrics, the c/p prediction protocol and ablation suites.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{estimate_step_cost, token_context_length, ContextMode};
use crate::error::{Error, Result};
use crate::inference::{
    last_quartile_slope, mix, predict, timing_harness, CacheMode, SamplerConfig, TimingConfig, TimingRow,
};
use crate::masking::AttentionPolicy;
use crate::model::{FarModel, ModelConfig};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::par::{self, Execution};
use crate::schedule::SENTINEL_CLEAN;
use crate::tokenizer::{kernel_admissible, Kernel, PatchifyConfig};
use crate::training::{sample_sse, train, TrainConfig, TrainSample, Video};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
/// Latents live in `[-1, 1]`.
pub const DEFAULT_DATA_RANGE: f64 = 2.0;

fn check_pair<F: Scalar>(a: &[Tensor<F>], b: &[Tensor<F>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("metric frame count", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::Invalid("metrics need at least one frame".into()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape("metric frame", x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// `10·log10(range² / MSE)` over all frames of a video, capped at [`PSNR_CAP`].
pub fn psnr<F: Scalar>(a: &[Tensor<F>], b: &[Tensor<F>], data_range: f64) -> Result<f64> {
    check_pair(a, b)?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            let d = u.as_f64() - v.as_f64();
            sse += d * d;
        }
        count += x.len();
    }
    let mse = sse / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over every 8×8 window position, channel and frame of `[H, W, d]`
/// frames, with a uniform window, population statistics and
/// `C1 = (0.01·range)²`, `C2 = (0.03·range)²`.
pub fn ssim<F: Scalar>(a: &[Tensor<F>], b: &[Tensor<F>], data_range: f64) -> Result<f64> {
    check_pair(a, b)?;
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = SSIM_WINDOW;
    let area = (k * k) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for (x, y) in a.iter().zip(b) {
        let [h, w, d] = *x.shape() else {
            return Err(Error::Invalid(format!("SSIM needs [H, W, d] frames, got {:?}", x.shape())));
        };
        if h < k || w < k {
            return Err(Error::Invalid(format!("SSIM needs frames of at least {k}x{k}, got {h}x{w}")));
        }
        let at = |t: &Tensor<F>, i: usize, j: usize, c: usize| t.data()[(i * w + j) * d + c].as_f64();
        for c in 0..d {
            for i0 in 0..=h - k {
                for j0 in 0..=w - k {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in i0..i0 + k {
                        for j in j0..j0 + k {
                            ma += at(x, i, j, c);
                            mb += at(y, i, j, c);
                        }
                    }
                    ma /= area;
                    mb /= area;
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in i0..i0 + k {
                        for j in j0..j0 + k {
                            let da = at(x, i, j, c) - ma;
                            let db = at(y, i, j, c) - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                    }
                    va /= area;
                    vb /= area;
                    cov /= area;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    windows += 1;
                }
            }
        }
    }
    Ok(total / windows as f64)
}

/// Predict `p` frames from `c` observed ones, `trajectories` times per video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub c: usize,
    pub p: usize,
    pub trajectories: usize,
    /// Keep the best trajectory by PSNR instead of averaging.
    pub best_of: bool,
    pub sampler: SamplerConfig,
    pub data_range: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            c: 8,
            p: 8,
            trajectories: 1,
            best_of: true,
            sampler: SamplerConfig {
                cache_mode: CacheMode::Kv,
                ..SamplerConfig::default()
            },
            data_range: DEFAULT_DATA_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of every trajectory, in seed order.
    pub trajectory_psnr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub videos: Vec<VideoMetrics>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub seconds: f64,
}

/// Sampler seed of trajectory `traj` of video `video`.
pub fn trajectory_seed(base: u64, video: usize, traj: usize) -> u64 {
    mix(base, 0x5EED_0000 + video as u64, traj)
}

/// Runs the protocol with an arbitrary predictor `(video index, video, seed) -> p frames`.
/// Trajectories run data-parallel under `exec`.
pub fn run_protocol_with<F, P>(
    videos: &[Video<F>],
    protocol: &EvalProtocol,
    exec: Execution,
    predictor: P,
) -> Result<ProtocolResult>
where
    F: Scalar,
    P: Fn(usize, &Video<F>, u64) -> Result<Vec<Tensor<F>>> + Sync + Send,
{
    let start = Instant::now();
    if protocol.trajectories == 0 {
        return Err(Error::Invalid("at least one trajectory is required".into()));
    }
    if protocol.p == 0 {
        return Ok(ProtocolResult {
            videos: Vec::new(),
            mean_psnr: None,
            mean_ssim: None,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    for (i, v) in videos.iter().enumerate() {
        if v.len() < protocol.c + protocol.p {
            return Err(Error::Invalid(format!(
                "video {i} has {} frames, protocol needs {}",
                v.len(),
                protocol.c + protocol.p
            )));
        }
    }
    let jobs = videos.len() * protocol.trajectories;
    let scores = par::map_indices(exec, jobs, |job| -> Result<(f64, f64)> {
        let (vi, traj) = (job / protocol.trajectories, job % protocol.trajectories);
        let v = &videos[vi];
        let pred = predictor(vi, v, trajectory_seed(protocol.sampler.seed, vi, traj))?;
        let truth = &v.frames[protocol.c..protocol.c + protocol.p];
        Ok((psnr(&pred, truth, protocol.data_range)?, ssim(&pred, truth, protocol.data_range)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(videos.len());
    for (vi, per) in scores.chunks(protocol.trajectories).enumerate() {
        let (p, s) = if protocol.best_of {
            let best = per
                .iter()
                .enumerate()
                .fold(0, |b, (i, x)| if x.0 > per[b].0 { i } else { b });
            per[best]
        } else {
            let n = per.len() as f64;
            (per.iter().map(|x| x.0).sum::<f64>() / n, per.iter().map(|x| x.1).sum::<f64>() / n)
        };
        out.push(VideoMetrics {
            video: vi,
            psnr: p,
            ssim: s,
            trajectory_psnr: per.iter().map(|x| x.0).collect(),
        });
    }
    let mean = |f: fn(&VideoMetrics) -> f64| (!out.is_empty()).then(|| out.iter().map(f).sum::<f64>() / out.len() as f64);
    Ok(ProtocolResult {
        mean_psnr: mean(|m| m.psnr),
        mean_ssim: mean(|m| m.ssim),
        videos: out,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rolls the model out from the first `c` frames of every video.
pub fn run_protocol<F: Scalar>(model: &FarModel<F>, videos: &[Video<F>], protocol: &EvalProtocol) -> Result<ProtocolResult> {
    protocol.sampler.validate(model.config())?;
    run_protocol_with(videos, protocol, model.execution(), |_, v, seed| {
        let sampler = SamplerConfig {
            seed,
            ..protocol.sampler.clone()
        };
        let roll = predict(
            model,
            &v.frames[..protocol.c],
            v.actions.as_deref(),
            v.class,
            protocol.p,
            &sampler,
        )?;
        Ok(roll.frames)
    })
}

pub const METRICS_CSV_HEADER: &str = "video,psnr,ssim,lpips,fvd";

/// Per-video rows plus a `mean` row. LPIPS and FVD columns stay empty.
pub fn write_metrics_csv(result: &ProtocolResult, out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("metrics csv", e);
    writeln!(out, "{METRICS_CSV_HEADER}").map_err(io)?;
    for m in &result.videos {
        writeln!(out, "{},{:.6},{:.6},,", m.video, m.psnr, m.ssim).map_err(io)?;
    }
    if let (Some(p), Some(s)) = (result.mean_psnr, result.mean_ssim) {
        writeln!(out, "mean,{p:.6},{s:.6},,").map_err(io)?;
    }
    Ok(())
}

/// Flow-matching loss of predicting each frame from clean history.
///
/// For every video, every target frame `j ≥ 1` and every noise level in
/// `levels`, the model sees up to `window - 1` clean preceding frames (older
/// ones through the long kernel when tiers are enabled, keeping the last
/// `short` at full resolution) and a noised frame `j`. Noise is seeded, so the
/// value is deterministic.
pub fn clean_context_loss<F: Scalar>(
    model: &FarModel<F>,
    videos: &[Video<F>],
    window: usize,
    short: usize,
    levels: &[f64],
    seed: u64,
) -> Result<f64> {
    if window == 0 || short == 0 || levels.is_empty() {
        return Err(Error::Invalid("clean-context loss needs a window, a short window and noise levels".into()));
    }
    let mut jobs = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for j in 1..v.len() {
            for li in 0..levels.len() {
                jobs.push((vi, j, li));
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::NoLossFrames);
    }
    let tiers = model.config().tiers_enabled;
    let parts = par::map_slice(model.execution(), &jobs, |&(vi, j, li)| -> Result<(f64, usize)> {
        let v = &videos[vi];
        let start = (j + 1).saturating_sub(window);
        let split = if tiers { (j + 1).saturating_sub(short).max(start) } else { start };
        let long = v.frames[start..split].to_vec();
        let x0 = v.frames[split..=j].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, vi as u64, j * levels.len() + li));
        let shape = x0[0].shape().to_vec();
        let mut x1: Vec<Tensor<F>> = x0.iter().map(|f| Tensor::zeros(f.shape())).collect();
        *x1.last_mut().expect("non-empty") = Tensor::randn(&shape, 1.0, &mut rng);
        let mut t = vec![SENTINEL_CLEAN; x0.len()];
        *t.last_mut().expect("non-empty") = levels[li];
        let actions = v.actions.as_ref().map(|a| a[start..=j].to_vec());
        let mut sample = TrainSample::build(long, x0, x1, t, actions)?;
        sample.class = v.class;
        let mut g = Graph::new();
        let sse = sample_sse(model, &mut g, &sample, AttentionPolicy::FrameCausal)?.ok_or(Error::NoLossFrames)?;
        Ok((g.scalar_value(sse).as_f64(), shape.iter().product()))
    });
    let mut sse = 0.0;
    let mut count = 0;
    for p in parts {
        let (s, c) = p?;
        sse += s;
        count += c;
    }
    Ok(sse / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Scc,
    Window,
    Kernel,
    Cache,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scc" => Ok(AblationKind::Scc),
            "window" => Ok(AblationKind::Window),
            "kernel" => Ok(AblationKind::Kernel),
            "cache" => Ok(AblationKind::Cache),
            other => Err(Error::Invalid(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Base training run; each variant overrides one knob.
    pub train: TrainConfig,
    pub protocol: EvalProtocol,
    /// Noise levels of the clean-context validation loss.
    pub val_levels: Vec<f64>,
    pub scc_fractions: [f64; 2],
    pub windows: Vec<usize>,
    /// Long kernels of the kernel suite.
    pub kernels: Vec<Kernel>,
    /// Short window used by the kernel suite.
    pub kernel_window: usize,
    /// PSNR within this many dB of the best counts as saturated.
    pub saturation_db: f64,
    pub timing: TimingConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            protocol: EvalProtocol::default(),
            val_levels: vec![0.2, 0.4, 0.6, 0.8],
            scc_fractions: [0.0, 0.1],
            windows: vec![2, 4, 8, 16],
            kernels: vec![Kernel::square(2), Kernel::square(4), Kernel::square(8)],
            kernel_window: 4,
            saturation_db: 0.5,
            timing: TimingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: AblationKind,
    pub variant: String,
    /// Mean loss over the last tenth of training.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<String>,
    /// Per-frame timings of the cache suite.
    pub timing: Vec<TimingRow>,
}

pub const ABLATION_CSV_HEADER: &str = "suite,variant,train_loss,val_loss,psnr,ssim,seconds,note";

pub fn write_ablation_csv(report: &AblationReport, out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("ablation csv", e);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    writeln!(out, "{ABLATION_CSV_HEADER}").map_err(io)?;
    for r in &report.rows {
        let suite = serde_json::to_value(r.suite)?;
        writeln!(
            out,
            "{},{},{},{},{},{},{:.3},{}",
            suite.as_str().unwrap_or("?"),
            r.variant,
            opt(r.train_loss),
            opt(r.val_loss),
            opt(r.psnr),
            opt(r.ssim),
            r.seconds,
            r.note.replace(',', ";")
        )
        .map_err(io)?;
    }
    Ok(())
}

fn tail_mean(losses: &[f64]) -> Option<f64> {
    let k = (losses.len() / 10).max(1).min(losses.len());
    (k > 0).then(|| losses[losses.len() - k..].iter().sum::<f64>() / k as f64)
}

/// One trained-and-evaluated variant.
fn run_variant<F: Scalar>(
    suite: AblationKind,
    variant: String,
    train_cfg: &TrainConfig,
    cfg: &AblationConfig,
    train_videos: &[Video<F>],
    val_videos: &[Video<F>],
    sampler_window: Option<usize>,
) -> Result<AblationRow> {
    let start = Instant::now();
    let mut model = FarModel::<F>::new(train_cfg.model.clone(), train_cfg.seed)?.with_execution(train_cfg.execution);
    let summary = train(&mut model, train_videos, train_cfg, None)?;
    let short = sampler_window.unwrap_or(train_cfg.window.m);
    let val = clean_context_loss(&model, val_videos, train_cfg.window.m, short, &cfg.val_levels, cfg.train.seed)?;
    let mut protocol = cfg.protocol.clone();
    if let Some(n) = sampler_window {
        protocol.sampler.short_window = Some(n);
        protocol.sampler.cache_mode = CacheMode::Multilevel;
    }
    let res = run_protocol(&model, val_videos, &protocol)?;
    Ok(AblationRow {
        suite,
        variant,
        train_loss: tail_mean(&summary.losses),
        val_loss: Some(val),
        psnr: res.mean_psnr,
        ssim: res.mean_ssim,
        seconds: start.elapsed().as_secs_f64(),
        note: String::new(),
    })
}

/// Smallest window whose PSNR is within `tol` dB of the best one.
pub fn saturation_point(points: &[(usize, f64)], tol: f64) -> Option<usize> {
    let best = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    sorted.into_iter().find(|p| p.1 >= best - tol).map(|p| p.0)
}

fn direction(label: &str, holds: bool) -> String {
    format!("{label}: {}", if holds { "yes" } else { "no" })
}

/// Trains and evaluates matched variants that differ in one knob, sharing
/// every seed. Comparisons are reported, never asserted.
pub fn ablation_suite<F: Scalar>(
    kind: AblationKind,
    cfg: &AblationConfig,
    train_videos: &[Video<F>],
    val_videos: &[Video<F>],
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut timing_rows = Vec::new();
    match kind {
        AblationKind::Scc => {
            for &f in &cfg.scc_fractions {
                let mut t = cfg.train.clone();
                t.window.scc_fraction = f;
                let window = t.model.tiers_enabled.then_some(t.window.n);
                rows.push(run_variant(kind, format!("scc={f}"), &t, cfg, train_videos, val_videos, window)?);
            }
            let (off, on) = (&rows[0], &rows[1]);
            summary.push(direction(
                "lower clean-context val loss with scc",
                on.val_loss < off.val_loss,
            ));
            summary.push(direction("higher psnr with scc", on.psnr > off.psnr));
            summary.push(direction("higher ssim with scc", on.ssim > off.ssim));
        }
        AblationKind::Window => {
            let mut points = Vec::new();
            for &n in &cfg.windows {
                let mut t = cfg.train.clone();
                t.model.tiers_enabled = true;
                t.window.n = n.min(t.window.m);
                let mut row = run_variant(kind, format!("n={n}"), &t, cfg, train_videos, val_videos, Some(t.window.n))?;
                let tokens = token_context_length(
                    t.window.m,
                    ContextMode::LongShort,
                    t.model.tpf_short(),
                    t.model.tpf_long(),
                    t.window.n,
                );
                row.note = format!("tokens at m={}: {tokens}", t.window.m);
                if let Some(p) = row.psnr {
                    points.push((n, p));
                }
                rows.push(row);
            }
            match saturation_point(&points, cfg.saturation_db) {
                Some(n) => summary.push(format!("psnr saturates at n={n} (within {} dB of best)", cfg.saturation_db)),
                None => summary.push("no saturation point: no psnr measured".into()),
            }
        }
        AblationKind::Kernel => {
            for &k in &cfg.kernels {
                let mut t = cfg.train.clone();
                t.model.tiers_enabled = true;
                t.model.long_kernel = k;
                t.window.n = cfg.kernel_window.min(t.window.m);
                let pc = PatchifyConfig::new(k, t.model.latent, t.model.hidden)?;
                let mut row = run_variant(kind, format!("long={k}"), &t, cfg, train_videos, val_videos, Some(t.window.n))?;
                let tokens = token_context_length(
                    t.window.m,
                    ContextMode::LongShort,
                    t.model.tpf_short(),
                    t.model.tpf_long(),
                    t.window.n,
                );
                let cost = estimate_step_cost(tokens, &t.model, F::DTYPE);
                row.note = format!(
                    "admissible={} tokens={tokens} attention_flops={:e}",
                    kernel_admissible(&pc),
                    cost.attention_flops
                );
                rows.push(row);
            }
            let best = rows
                .iter()
                .filter(|r| r.psnr.is_some())
                .max_by(|a, b| a.psnr.unwrap_or(f64::MIN).total_cmp(&b.psnr.unwrap_or(f64::MIN)));
            if let Some(b) = best {
                summary.push(format!("best psnr with {}", b.variant));
            }
        }
        AblationKind::Cache => {
            let mut model_cfg: ModelConfig = cfg.train.model.clone();
            model_cfg.tiers_enabled = true;
            let model = FarModel::<F>::new(model_cfg, cfg.train.seed)?.with_execution(cfg.train.execution);
            let timing = timing_harness(&model, &cfg.timing)?;
            let mut slopes = Vec::new();
            for &mode in &cfg.timing.modes {
                let secs: Vec<f64> = timing.iter().filter(|r| r.mode == mode).map(|r| r.seconds).collect();
                let slope = last_quartile_slope(&secs);
                slopes.push((mode, secs.iter().sum::<f64>(), slope));
                let name = serde_json::to_value(mode)?;
                rows.push(AblationRow {
                    suite: kind,
                    variant: name.as_str().unwrap_or("?").to_string(),
                    train_loss: None,
                    val_loss: None,
                    psnr: None,
                    ssim: None,
                    seconds: secs.iter().sum(),
                    note: format!("last-quartile slope={:e}", slope.unwrap_or(f64::NAN)),
                });
            }
            let total = |m: CacheMode| slopes.iter().find(|s| s.0 == m).map(|s| s.1);
            if let (Some(n), Some(k), Some(ml)) = (total(CacheMode::None), total(CacheMode::Kv), total(CacheMode::Multilevel)) {
                summary.push(direction("wallclock none > kv > multilevel", n > k && k > ml));
            }
            timing_rows = timing;
        }
    }
    Ok(AblationReport {
        rows,
        summary,
        timing: timing_rows,
    })
}

//! Analytic token, FLOP and KV-memory accounting.
//!
//! Costs are closed forms, not measurements:
//!
//! - attention FLOPs per layer: `4·N²·D` (scores plus weighted values, two FLOPs per MAC)
//! - linear FLOPs per layer: `8·N·D² + 4·N·D·M` (QKV and output projections, then the MLP)
//! - KV bytes: `L·2·N·D·sizeof(dtype)`
//!
//! with `N` tokens, width `D`, MLP width `M` and `L` layers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::DType;
use crate::tokenizer::{kernel_admissible, Kernel, LatentDims, PatchifyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Every frame uses the short kernel.
    Uniform,
    /// The last `n` frames use the short kernel, older ones the long kernel.
    LongShort,
}

impl ContextMode {
    pub fn name(self) -> &'static str {
        match self {
            ContextMode::Uniform => "uniform",
            ContextMode::LongShort => "long_short",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ContextMode::Uniform),
            "long_short" | "long-short" => Ok(ContextMode::LongShort),
            other => Err(Error::Invalid(format!("unknown context mode {other:?}"))),
        }
    }
}

/// Tokens needed to hold `frames` frames of context.
pub fn token_context_length(frames: usize, mode: ContextMode, tpf_short: usize, tpf_long: usize, n: usize) -> usize {
    match mode {
        ContextMode::Uniform => frames * tpf_short,
        ContextMode::LongShort => frames.min(n) * tpf_short + frames.saturating_sub(n) * tpf_long,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub attention_flops: f64,
    pub linear_flops: f64,
    pub kv_bytes: f64,
}

impl StepCost {
    pub fn flops(&self) -> f64 {
        self.attention_flops + self.linear_flops
    }
}

/// Forward cost of one pass over `tokens` tokens.
pub fn estimate_step_cost(tokens: usize, cfg: &ModelConfig, dtype: DType) -> StepCost {
    let n = tokens as f64;
    let d = cfg.hidden as f64;
    let m = cfg.mlp as f64;
    let l = cfg.layers as f64;
    StepCost {
        attention_flops: l * 4.0 * n * n * d,
        linear_flops: l * (8.0 * n * d * d + 4.0 * n * d * m),
        kv_bytes: l * 2.0 * n * d * dtype.size_bytes() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub vision_context_frames: usize,
    pub token_context_length: usize,
    pub est_attention_flops: f64,
    pub est_kv_memory_bytes: f64,
    pub mode: ContextMode,
}

/// Budget of `frames` frames under `cfg`'s kernels with short window `n`.
pub fn budget_report(frames: usize, mode: ContextMode, cfg: &ModelConfig, n: usize, dtype: DType) -> BudgetReport {
    let tokens = token_context_length(frames, mode, cfg.tpf_short(), cfg.tpf_long(), n);
    let cost = estimate_step_cost(tokens, cfg, dtype);
    BudgetReport {
        vision_context_frames: frames,
        token_context_length: tokens,
        est_attention_flops: cost.attention_flops,
        est_kv_memory_bytes: cost.kv_bytes,
        mode,
    }
}

/// Reports for `step, 2·step, …` up to `frames_max` (inclusive) in each mode.
pub fn budget_curve(
    frames_max: usize,
    step: usize,
    modes: &[ContextMode],
    cfg: &ModelConfig,
    n: usize,
    dtype: DType,
) -> Result<Vec<BudgetReport>> {
    if step == 0 {
        return Err(Error::Invalid("frame step must be positive".into()));
    }
    let mut out = Vec::new();
    for &mode in modes {
        let mut f = step;
        while f <= frames_max {
            out.push(budget_report(f, mode, cfg, n, dtype));
            f += step;
        }
    }
    Ok(out)
}

pub const BUDGET_CSV_HEADER: &str = "mode,frames,tokens,attention_flops,kv_bytes";

pub fn write_budget_csv(rows: &[BudgetReport], out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("budget csv", e);
    writeln!(out, "{BUDGET_CSV_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:e},{:e}",
            r.mode.name(),
            r.vision_context_frames,
            r.token_context_length,
            r.est_attention_flops,
            r.est_kv_memory_bytes
        )
        .map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPlan {
    pub kernel: Kernel,
    pub tokens_per_frame: usize,
    /// Values packed into one token, `c_h·c_w·d`.
    pub token_width: usize,
    pub admissible: bool,
    /// Cost of a `frames`-frame context tokenized entirely with this kernel.
    pub cost: StepCost,
}

/// Ranks candidate kernels by estimated memory, cheapest first. Kernels that
/// do not tile the latent are skipped.
pub fn plan_kernel(
    latent: LatentDims,
    cfg: &ModelConfig,
    candidates: &[Kernel],
    frames: usize,
    dtype: DType,
) -> Vec<KernelPlan> {
    let mut plans: Vec<KernelPlan> = candidates
        .iter()
        .filter_map(|&kernel| PatchifyConfig::new(kernel, latent, cfg.hidden).ok())
        .map(|pc| {
            let tpf = latent.tokens_per_frame(pc.kernel);
            KernelPlan {
                kernel: pc.kernel,
                tokens_per_frame: tpf,
                token_width: latent.token_width(pc.kernel),
                admissible: kernel_admissible(&pc),
                cost: estimate_step_cost(frames * tpf, cfg, dtype),
            }
        })
        .collect();
    plans.sort_by(|a, b| a.cost.kv_bytes.total_cmp(&b.cost.kv_bytes));
    plans
}

/// Cheapest admissible kernel, if any.
pub fn recommend_kernel(plans: &[KernelPlan]) -> Option<&KernelPlan> {
    plans.iter().find(|p| p.admissible)
}

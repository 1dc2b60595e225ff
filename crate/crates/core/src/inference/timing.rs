use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{predict, CacheMode, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::FarModel;
use crate::numerics::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    /// Rollout length in frames.
    pub frames: usize,
    pub steps: usize,
    /// Short window of the multilevel run.
    pub short_window: usize,
    pub modes: Vec<CacheMode>,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            frames: 64,
            steps: 8,
            short_window: 2,
            modes: vec![CacheMode::None, CacheMode::Kv, CacheMode::Multilevel],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub mode: CacheMode,
    pub frame: usize,
    pub seconds: f64,
}

/// Unconditional rollouts of `cfg.frames` frames under each cache mode, timed
/// per frame. `none` and `kv` use the uniform layout; `multilevel` uses the
/// long short-term layout with `cfg.short_window`.
pub fn timing_harness<F: Scalar>(model: &FarModel<F>, cfg: &TimingConfig) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        let sampler = SamplerConfig {
            steps: cfg.steps,
            cache_mode: mode,
            short_window: (mode == CacheMode::Multilevel).then_some(cfg.short_window),
            seed: cfg.seed,
            ..SamplerConfig::default()
        };
        let roll = predict(model, &[], None, None, cfg.frames, &sampler)?;
        rows.extend(roll.seconds.iter().enumerate().map(|(frame, &seconds)| TimingRow {
            mode,
            frame,
            seconds,
        }));
    }
    Ok(rows)
}

pub fn write_timing_csv(rows: &[TimingRow], out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("timing.csv", e);
    writeln!(out, "mode,frame,seconds").map_err(io)?;
    for r in rows {
        let mode = serde_json::to_value(r.mode)?;
        writeln!(out, "{},{},{:.9}", mode.as_str().unwrap_or("?"), r.frame, r.seconds).map_err(io)?;
    }
    Ok(())
}

/// Least-squares slope of per-frame cost against frame index over the last
/// quarter of the rollout (at least two points).
pub fn last_quartile_slope(seconds: &[f64]) -> Option<f64> {
    let n = seconds.len();
    if n < 2 {
        return None;
    }
    let start = (n - n / 4).min(n - 2);
    let pts: Vec<(f64, f64)> = (start..n).map(|i| (i as f64, seconds[i])).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

//! Frame-causal attention masks.
//!
//! A query token may attend a key token iff the key's frame is not later than
//! the query's frame: full attention inside a frame, causal across frames. The
//! rule is the same for every tier, so long-term context tokens also see other
//! long-term tokens of earlier or equal frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tier;

/// Per-token frame indices and tiers of one token stream.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttentionLayout {
    pub frame_index: Vec<usize>,
    pub tier: Vec<Tier>,
}

impl AttentionLayout {
    pub fn new(frame_index: Vec<usize>, tier: Vec<Tier>) -> Result<Self> {
        if frame_index.len() != tier.len() {
            return Err(Error::shape(
                "attention layout",
                &[frame_index.len()],
                &[tier.len()],
            ));
        }
        Ok(AttentionLayout { frame_index, tier })
    }

    /// `frames` frames of `tokens_per_frame` short-tier tokens each.
    pub fn uniform(tokens_per_frame: usize, frames: usize) -> Self {
        let frame_index = (0..frames)
            .flat_map(|f| std::iter::repeat_n(f, tokens_per_frame))
            .collect::<Vec<_>>();
        let tier = vec![Tier::Short; frame_index.len()];
        AttentionLayout { frame_index, tier }
    }

    /// `long_frames` coarse frames followed by `short_frames` fine frames,
    /// numbered consecutively from `first_frame`.
    pub fn long_short(
        first_frame: usize,
        long_frames: usize,
        tpf_long: usize,
        short_frames: usize,
        tpf_short: usize,
    ) -> Self {
        let mut frame_index = Vec::new();
        let mut tier = Vec::new();
        for f in 0..long_frames {
            frame_index.extend(std::iter::repeat_n(first_frame + f, tpf_long));
            tier.extend(std::iter::repeat_n(Tier::Long, tpf_long));
        }
        for f in 0..short_frames {
            frame_index.extend(std::iter::repeat_n(first_frame + long_frames + f, tpf_short));
            tier.extend(std::iter::repeat_n(Tier::Short, tpf_short));
        }
        AttentionLayout { frame_index, tier }
    }

    pub fn len(&self) -> usize {
        self.frame_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index.is_empty()
    }

    pub fn concat(&self, other: &AttentionLayout) -> AttentionLayout {
        let mut out = self.clone();
        out.frame_index.extend_from_slice(&other.frame_index);
        out.tier.extend_from_slice(&other.tier);
        out
    }

    /// Frame indices nondecreasing and every long-tier frame strictly before
    /// every short-tier frame.
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.frame_index.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::Layout(format!(
                "frame index decreases from {} to {}",
                w[0], w[1]
            )));
        }
        let last_long = self
            .frame_index
            .iter()
            .zip(&self.tier)
            .filter(|(_, &t)| t == Tier::Long)
            .map(|(&f, _)| f)
            .max();
        let first_short = self
            .frame_index
            .iter()
            .zip(&self.tier)
            .filter(|(_, &t)| t == Tier::Short)
            .map(|(&f, _)| f)
            .min();
        if let (Some(l), Some(s)) = (last_long, first_short) {
            if l >= s {
                return Err(Error::Layout(format!(
                    "long-term frame {l} does not precede short-term frame {s}"
                )));
            }
        }
        Ok(())
    }
}

/// How queries may see keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPolicy {
    /// Causal across frames, full within a frame.
    #[default]
    FrameCausal,
    /// Every query sees every key (Video-DiT comparison mode).
    Full,
}

/// Dense boolean mask, `true` where attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.data[q * self.cols..(q + 1) * self.cols]
    }

    /// Binary PGM (P5), white where allowed.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }
}

/// Mask between a query stream and a key stream given their frame indices.
pub fn frame_mask(query_frames: &[usize], key_frames: &[usize], policy: AttentionPolicy) -> Mask {
    let data = query_frames
        .iter()
        .flat_map(|&fq| {
            key_frames.iter().map(move |&fk| match policy {
                AttentionPolicy::FrameCausal => fk <= fq,
                AttentionPolicy::Full => true,
            })
        })
        .collect();
    Mask {
        rows: query_frames.len(),
        cols: key_frames.len(),
        data,
    }
}

/// Frame-causal mask over `frames` frames of `tokens_per_frame` tokens.
pub fn build_causal_frame_mask(tokens_per_frame: usize, frames: usize) -> Mask {
    let layout = AttentionLayout::uniform(tokens_per_frame, frames);
    frame_mask(&layout.frame_index, &layout.frame_index, AttentionPolicy::FrameCausal)
}

/// Frame-causal mask over a heterogeneous long short-term layout.
pub fn build_long_short_mask(layout: &AttentionLayout) -> Result<Mask> {
    layout.validate()?;
    Ok(frame_mask(
        &layout.frame_index,
        &layout.frame_index,
        AttentionPolicy::FrameCausal,
    ))
}

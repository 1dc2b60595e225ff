use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Kernel, LatentDims};

/// Transformer size and tokenization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    /// Adds a separate long-term projection and positional table.
    pub tiers_enabled: bool,
    pub latent: LatentDims,
    pub short_kernel: Kernel,
    pub long_kernel: Kernel,
    pub max_frames: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub num_actions: usize,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_freq_dim() -> usize {
    256
}

fn default_ln_eps() -> f64 {
    1e-6
}

/// Latent geometry used by the reference configurations: 8×8 latents with 32 channels.
pub const REFERENCE_LATENT: LatentDims = LatentDims::new(8, 8, 32);

impl ModelConfig {
    fn sized(layers: usize, hidden: usize, mlp: usize, heads: usize, latent: LatentDims) -> Self {
        ModelConfig {
            layers,
            hidden,
            mlp,
            heads,
            tiers_enabled: false,
            latent,
            short_kernel: Kernel::square(1),
            long_kernel: Kernel::square(4),
            max_frames: 1024,
            num_classes: 0,
            num_actions: 0,
            freq_dim: default_freq_dim(),
            ln_eps: default_ln_eps(),
        }
    }

    /// Desk-scale model: 2 layers, width 64, MLP 256, 4 heads, on 8×8×8
    /// latents with 2×2 short patches and 4×4 long patches.
    pub fn tiny() -> Self {
        ModelConfig {
            short_kernel: Kernel::square(2),
            max_frames: 512,
            num_actions: crate::data::Action::COUNT,
            ..Self::sized(2, 64, 256, 4, LatentDims::new(8, 8, 8))
        }
    }

    pub fn base(latent: LatentDims) -> Self {
        Self::sized(12, 768, 3072, 12, latent)
    }

    pub fn medium(latent: LatentDims) -> Self {
        Self::sized(12, 1024, 4096, 16, latent)
    }

    pub fn large(latent: LatentDims) -> Self {
        Self::sized(24, 1024, 4096, 16, latent)
    }

    pub fn xlarge(latent: LatentDims) -> Self {
        Self::sized(28, 1152, 4608, 18, latent)
    }

    /// Looks up a preset by name: `tiny`, `B`, `M`, `L`, `XL` (case-insensitive),
    /// the large ones at the reference latent geometry.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::tiny()),
            "b" => Ok(Self::base(REFERENCE_LATENT)),
            "m" => Ok(Self::medium(REFERENCE_LATENT)),
            "l" => Ok(Self::large(REFERENCE_LATENT)),
            "xl" => Ok(Self::xlarge(REFERENCE_LATENT)),
            other => Err(Error::Invalid(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn with_tiers(mut self, enabled: bool) -> Self {
        self.tiers_enabled = enabled;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn tpf_short(&self) -> usize {
        self.latent.tokens_per_frame(self.short_kernel)
    }

    pub fn tpf_long(&self) -> usize {
        self.latent.tokens_per_frame(self.long_kernel)
    }

    pub fn short_width(&self) -> usize {
        self.latent.token_width(self.short_kernel)
    }

    pub fn long_width(&self) -> usize {
        self.latent.token_width(self.long_kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.mlp == 0 || self.heads == 0 {
            return Err(Error::Invalid("model sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.freq_dim % 2 != 0 || self.hidden % 2 != 0 {
            return Err(Error::Invalid("embedding widths must be even".into()));
        }
        self.latent.check_kernel(self.short_kernel)?;
        if self.tiers_enabled {
            self.latent.check_kernel(self.long_kernel)?;
        }
        Ok(())
    }

    /// Name and shape of every parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |n: &str, s: &[usize]| out.push((n.to_string(), s.to_vec()));
        push("embed.short.w", &[self.short_width(), d]);
        push("embed.short.b", &[d]);
        push("pos.short", &[self.tpf_short(), d]);
        if self.tiers_enabled {
            push("embed.long.w", &[self.long_width(), d]);
            push("embed.long.b", &[d]);
            push("pos.long", &[self.tpf_long(), d]);
        }
        push("t_embed.w1", &[self.freq_dim, d]);
        push("t_embed.b1", &[d]);
        push("t_embed.w2", &[d, d]);
        push("t_embed.b2", &[d]);
        push("t_embed.clean", &[1, d]);
        if self.num_classes > 0 {
            push("class_embed", &[self.num_classes + 1, d]);
        }
        if self.num_actions > 0 {
            push("action_embed", &[self.num_actions + 1, d]);
        }
        for l in 0..self.layers {
            let p = format!("blocks.{l}");
            push(&format!("{p}.ada.w"), &[d, 6 * d]);
            push(&format!("{p}.ada.b"), &[6 * d]);
            for m in ["q", "k", "v", "o"] {
                push(&format!("{p}.attn.w{m}"), &[d, d]);
                push(&format!("{p}.attn.b{m}"), &[d]);
            }
            push(&format!("{p}.mlp.w1"), &[d, self.mlp]);
            push(&format!("{p}.mlp.b1"), &[self.mlp]);
            push(&format!("{p}.mlp.w2"), &[self.mlp, d]);
            push(&format!("{p}.mlp.b2"), &[d]);
        }
        push("final.ada.w", &[d, 2 * d]);
        push("final.ada.b", &[2 * d]);
        push("head.w", &[d, self.short_width()]);
        push("head.b", &[self.short_width()]);
        out
    }

    /// Total scalar parameter count, without allocating anything.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

//! Frame-autoregressive (FAR) video modeling at desk scale.
//!
//! A frame-causal transformer trained with per-frame flow matching on
//! continuous latent frames. Recent frames are tokenized finely and distant
//! frames coarsely (asymmetric patchify), and inference reuses attention
//! keys/values through a single-level or two-level KV cache.
//!
//! Module map:
//!
//! - [`numerics`]: dense tensors and a tape-based reverse-mode autodiff.
//! - [`schedule`]: flow-matching interpolant, velocity targets, loss, timestep sampling.
//! - [`tokenizer`]: patchify / unpatchify and kernel admissibility.
//! - [`masking`]: frame-causal attention masks over uniform and long short-term layouts.
//! - [`model`]: the transformer, its configuration ladder and checkpoints.
//! - [`training`]: batch assembly, stochastic clean context, Adam, the Video-DiT mode.
//! - [`inference`]: Euler sampling, guidance, KV and multi-level KV caches, timing.
//! - [`budget`]: analytic token/FLOP/memory accounting and kernel planning.
//! - [`data`]: synthetic action-conditioned latent worlds and the dataset container.
//! - [`eval`]: PSNR/SSIM, the c/p prediction protocol and ablation suites.

pub mod budget;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod par;
pub mod schedule;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{DType, Scalar, Tensor};

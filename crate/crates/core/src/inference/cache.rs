//! Two-tier key/value storage for autoregressive rollouts.
//!
//! L1 holds fine-grained (short-kernel) keys and values of the most recent
//! frames; L2 holds coarse (long-kernel) entries of older frames. Every entry
//! keeps the clean latent it was encoded from, so L1 can be re-encoded after an
//! eviction changes what it attends to.

use crate::error::{Error, Result};
use crate::model::{FarModel, ForwardInput, FrameInput, PastKv};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::{patchify, Tier};

#[derive(Debug, Clone, PartialEq)]
pub struct CachedFrame<F> {
    pub index: usize,
    /// Clean `[H, W, d]` latent.
    pub latent: Tensor<F>,
    pub action: Option<usize>,
    /// Timestep the frame was encoded with.
    pub t: f64,
    pub kv: PastKv<F>,
}

impl<F: Scalar> CachedFrame<F> {
    /// `[layers, heads, tokens, head_dim]` of this frame's keys (and values).
    pub fn kv_shape(&self, heads: usize) -> [usize; 4] {
        let (k, _) = &self.kv.layers[0];
        [self.kv.layers.len(), heads, k.rows(), k.cols() / heads]
    }
}

/// Options shared by every encode of one session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeCond {
    pub class: Option<usize>,
    pub null_cond: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCacheStore<F> {
    /// L1 capacity in frames, counting the frame being generated. `None` means unbounded
    /// (plain KV cache, no L2).
    capacity: Option<usize>,
    l1: Vec<CachedFrame<F>>,
    l2: Vec<CachedFrame<F>>,
}

impl<F: Scalar> KvCacheStore<F> {
    /// Single-level cache that keeps every frame in L1.
    pub fn unbounded() -> Self {
        KvCacheStore {
            capacity: None,
            l1: Vec::new(),
            l2: Vec::new(),
        }
    }

    /// Two-level cache with short window `n >= 1`.
    pub fn multilevel(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("short window must be at least 1".into()));
        }
        Ok(KvCacheStore {
            capacity: Some(n),
            l1: Vec::new(),
            l2: Vec::new(),
        })
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn l1(&self) -> &[CachedFrame<F>] {
        &self.l1
    }

    pub fn l2(&self) -> &[CachedFrame<F>] {
        &self.l2
    }

    pub fn num_frames(&self) -> usize {
        self.l1.len() + self.l2.len()
    }

    fn next_index(&self) -> Option<usize> {
        self.l1.last().or(self.l2.last()).map(|f| f.index + 1)
    }

    /// Keys and values of L2 followed by L1.
    pub fn past(&self) -> Result<Option<PastKv<F>>> {
        let parts: Vec<&PastKv<F>> = self.l2.iter().chain(&self.l1).map(|f| &f.kv).collect();
        PastKv::concat(&parts)
    }

    fn l2_past(&self) -> Result<Option<PastKv<F>>> {
        let parts: Vec<&PastKv<F>> = self.l2.iter().map(|f| &f.kv).collect();
        PastKv::concat(&parts)
    }

    /// Whether a new frame must trigger an eviction before it is generated.
    pub fn needs_eviction(&self) -> bool {
        self.capacity.is_some_and(|n| self.l1.len() >= n)
    }

    /// Encodes a clean frame against everything cached so far and appends it to L1.
    pub fn cache_frame(
        &mut self,
        model: &FarModel<F>,
        index: usize,
        latent: &Tensor<F>,
        action: Option<usize>,
        t: f64,
        cond: EncodeCond,
    ) -> Result<()> {
        if let Some(next) = self.next_index() {
            if index != next {
                return Err(Error::Cache(format!("expected frame {next}, got {index}")));
            }
        }
        if self.capacity.is_some_and(|n| self.l1.len() >= n) {
            return Err(Error::Cache("L1 is full; evict before caching".into()));
        }
        let cfg = model.config();
        let frame = FrameInput {
            index,
            tier: Tier::Short,
            tokens: patchify(latent, cfg.short_kernel)?,
            t,
            action,
            predict: false,
        };
        let input = ForwardInput {
            frames: vec![frame],
            class: cond.class,
            null_cond: cond.null_cond,
            policy: Default::default(),
        };
        let past = self.past()?;
        let kv = model.encode(&input, past.as_ref())?;
        self.l1.push(CachedFrame {
            index,
            latent: latent.clone(),
            action,
            t,
            kv,
        });
        Ok(())
    }

    /// Moves the oldest L1 frame into L2 (re-patchified with the long kernel)
    /// and re-encodes the remaining L1 frames against the new L2.
    pub fn evict_and_reencode(&mut self, model: &FarModel<F>, cond: EncodeCond) -> Result<()> {
        let Some(n) = self.capacity else {
            return Err(Error::Cache("an unbounded cache never evicts".into()));
        };
        if self.l1.len() != n {
            return Err(Error::Cache(format!("eviction needs |L1| = {n}, have {}", self.l1.len())));
        }
        let cfg = model.config();
        if !cfg.tiers_enabled {
            return Err(Error::Cache("multi-level caching needs a model with tiers enabled".into()));
        }
        let oldest = self.l1.remove(0);
        let frame = FrameInput {
            index: oldest.index,
            tier: Tier::Long,
            tokens: patchify(&oldest.latent, cfg.long_kernel)?,
            t: oldest.t,
            action: oldest.action,
            predict: false,
        };
        let l2_past = self.l2_past()?;
        let kv = model.encode(
            &ForwardInput {
                frames: vec![frame],
                class: cond.class,
                null_cond: cond.null_cond,
                policy: Default::default(),
            },
            l2_past.as_ref(),
        )?;
        self.l2.push(CachedFrame { kv, ..oldest });
        if self.l1.is_empty() {
            return Ok(());
        }
        let frames = self
            .l1
            .iter()
            .map(|f| {
                Ok(FrameInput {
                    index: f.index,
                    tier: Tier::Short,
                    tokens: patchify(&f.latent, cfg.short_kernel)?,
                    t: f.t,
                    action: f.action,
                    predict: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let l2_past = self.l2_past()?;
        let all = model.encode(
            &ForwardInput {
                frames,
                class: cond.class,
                null_cond: cond.null_cond,
                policy: Default::default(),
            },
            l2_past.as_ref(),
        )?;
        // Split the joint encoding back into per-frame entries.
        let mut row = 0;
        for f in &mut self.l1 {
            let rows = f.kv.len();
            let layers = all
                .layers
                .iter()
                .map(|(k, v)| Ok((k.slice_rows(row, row + rows)?, v.slice_rows(row, row + rows)?)))
                .collect::<Result<Vec<_>>>()?;
            f.kv = PastKv {
                frame_index: all.frame_index[row..row + rows].to_vec(),
                layers,
            };
            row += rows;
        }
        Ok(())
    }
}

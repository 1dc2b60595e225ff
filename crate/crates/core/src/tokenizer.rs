//! Spatial patchify / unpatchify of latent frames.
//!
//! A frame is a `[H, W, d]` tensor. A kernel `(c_h, c_w)` cuts it into a grid
//! of `(H/c_h)·(W/c_w)` patches, each flattened to `c_h·c_w·d` channels.
//! Token order is row-major over the patch grid; inside a token the values are
//! row-major over the patch pixels, then channel. The mapping is a pure
//! rearrangement, so round-trips are bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Kernel {
    pub h: usize,
    pub w: usize,
}

impl Kernel {
    pub const fn new(h: usize, w: usize) -> Self {
        Kernel { h, w }
    }

    pub const fn square(c: usize) -> Self {
        Kernel { h: c, w: c }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

impl From<[usize; 2]> for Kernel {
    fn from(v: [usize; 2]) -> Self {
        Kernel::new(v[0], v[1])
    }
}

impl From<Kernel> for [usize; 2] {
    fn from(k: Kernel) -> Self {
        [k.h, k.w]
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.h, self.w)
    }
}

/// Spatial size and channel count of one latent frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl LatentDims {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        LatentDims { h, w, d }
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn check_kernel(&self, k: Kernel) -> Result<()> {
        if k.h == 0 || k.w == 0 || self.h % k.h != 0 || self.w % k.w != 0 {
            return Err(Error::Invalid(format!(
                "kernel {k} does not tile a {}x{} latent",
                self.h, self.w
            )));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self, k: Kernel) -> usize {
        (self.h / k.h) * (self.w / k.w)
    }

    pub fn token_width(&self, k: Kernel) -> usize {
        k.area() * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchifyConfig {
    pub kernel: Kernel,
    pub latent: LatentDims,
    pub model_width: usize,
}

impl PatchifyConfig {
    pub fn new(kernel: Kernel, latent: LatentDims, model_width: usize) -> Result<Self> {
        latent.check_kernel(kernel)?;
        Ok(PatchifyConfig {
            kernel,
            latent,
            model_width,
        })
    }
}

/// Whether a patch fits the model width: `c_h·c_w·d ≤ D`. Advisory only;
/// inadmissible kernels still work but squeeze information.
pub fn kernel_admissible(cfg: &PatchifyConfig) -> bool {
    cfg.latent.token_width(cfg.kernel) <= cfg.model_width
}

fn check_frame<F: Scalar>(frame: &Tensor<F>) -> Result<LatentDims> {
    match *frame.shape() {
        [h, w, d] => Ok(LatentDims::new(h, w, d)),
        _ => Err(Error::Invalid(format!(
            "frame must be [H, W, d], got {:?}",
            frame.shape()
        ))),
    }
}

/// `[H, W, d]` frame to `[(H/c_h)·(W/c_w), c_h·c_w·d]` tokens.
pub fn patchify<F: Scalar>(frame: &Tensor<F>, kernel: Kernel) -> Result<Tensor<F>> {
    let dims = check_frame(frame)?;
    dims.check_kernel(kernel)?;
    let (gh, gw) = (dims.h / kernel.h, dims.w / kernel.w);
    let d = dims.d;
    let src = frame.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for iy in 0..kernel.h {
                let y = py * kernel.h + iy;
                let start = (y * dims.w + px * kernel.w) * d;
                out.extend_from_slice(&src[start..start + kernel.w * d]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dims.token_width(kernel)], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(tokens: &Tensor<F>, kernel: Kernel, dims: LatentDims) -> Result<Tensor<F>> {
    dims.check_kernel(kernel)?;
    let expect = [dims.tokens_per_frame(kernel), dims.token_width(kernel)];
    if tokens.rank() != 2 || tokens.shape() != expect {
        return Err(Error::shape("unpatchify", tokens.shape(), &expect));
    }
    let gw = dims.w / kernel.w;
    let d = dims.d;
    let mut out = vec![F::zero(); dims.frame_len()];
    for (t, tok) in tokens.data().chunks(expect[1]).enumerate() {
        let (py, px) = (t / gw, t % gw);
        for iy in 0..kernel.h {
            let y = py * kernel.h + iy;
            let start = (y * dims.w + px * kernel.w) * d;
            out[start..start + kernel.w * d]
                .copy_from_slice(&tok[iy * kernel.w * d..(iy + 1) * kernel.w * d]);
        }
    }
    Tensor::new(dims.shape().to_vec(), out)
}

/// Context tier of a frame's tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Distant context, coarse kernel.
    Long,
    /// Recent / current frames, fine kernel.
    Short,
}

/// The patchified tokens of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens<F> {
    pub frame_index: usize,
    pub tier: Tier,
    pub tokens: Tensor<F>,
}

/// Frames in temporal order, each carrying its own tier. Tokens of one frame
/// stay contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    pub frames: Vec<FrameTokens<F>>,
}

impl<F: Scalar> TokenSequence<F> {
    /// Tokenizes frames `first_index..` with the given tiers.
    pub fn from_frames(
        frames: &[&Tensor<F>],
        first_index: usize,
        tiers: &[Tier],
        short: Kernel,
        long: Kernel,
    ) -> Result<Self> {
        if frames.len() != tiers.len() {
            return Err(Error::shape("token sequence", &[frames.len()], &[tiers.len()]));
        }
        let frames = frames
            .iter()
            .zip(tiers)
            .enumerate()
            .map(|(i, (f, &tier))| {
                let k = if tier == Tier::Long { long } else { short };
                Ok(FrameTokens {
                    frame_index: first_index + i,
                    tier,
                    tokens: patchify(f, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(|f| f.tokens.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame index of every token.
    pub fn frame_index(&self) -> Vec<usize> {
        self.frames
            .iter()
            .flat_map(|f| std::iter::repeat_n(f.frame_index, f.tokens.rows()))
            .collect()
    }

    /// Tier of every token.
    pub fn tier(&self) -> Vec<Tier> {
        self.frames
            .iter()
            .flat_map(|f| std::iter::repeat_n(f.tier, f.tokens.rows()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: LatentDims) -> Tensor<f32> {
        Tensor::from_fn(&dims.shape(), |i| i as f32)
    }

    #[test]
    fn token_counts_match_reference_configs() {
        let dims = LatentDims::new(8, 8, 32);
        let f = ramp(dims);
        assert_eq!(patchify(&f, Kernel::square(1)).unwrap().shape(), &[64, 32]);
        assert_eq!(patchify(&f, Kernel::square(4)).unwrap().shape(), &[4, 512]);
        let whole = patchify(&f, Kernel::square(8)).unwrap();
        assert_eq!(whole.shape(), &[1, 64 * 32]);
        // a whole-frame patch is the frame itself in row-major order
        assert_eq!(whole.data(), f.data());
    }

    #[test]
    fn ordering_is_grid_then_pixel_then_channel() {
        let dims = LatentDims::new(4, 4, 2);
        let f = ramp(dims);
        let t = patchify(&f, Kernel::square(2)).unwrap();
        // token 1 is patch (row 0, col 1): pixels (0,2),(0,3),(1,2),(1,3)
        let idx = |y: usize, x: usize, c: usize| ((y * 4 + x) * 2 + c) as f32;
        let want = [
            idx(0, 2, 0),
            idx(0, 2, 1),
            idx(0, 3, 0),
            idx(0, 3, 1),
            idx(1, 2, 0),
            idx(1, 2, 1),
            idx(1, 3, 0),
            idx(1, 3, 1),
        ];
        assert_eq!(t.row(1), &want);
    }

    #[test]
    fn round_trip_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = LatentDims::new(8, 8, 32);
        let f = Tensor::<f32>::randn(&dims.shape(), 1.0, &mut rng);
        for c in [1, 4] {
            let k = Kernel::square(c);
            assert_eq!(unpatchify(&patchify(&f, k).unwrap(), k, dims).unwrap(), f);
        }
        let r = ramp(dims);
        let k = Kernel::new(2, 4);
        assert_eq!(unpatchify(&patchify(&r, k).unwrap(), k, dims).unwrap(), r);
    }

    #[test]
    fn errors_on_bad_kernel_or_dims() {
        let f = ramp(LatentDims::new(8, 8, 2));
        assert!(patchify(&f, Kernel::square(3)).is_err());
        let t = patchify(&f, Kernel::square(2)).unwrap();
        assert!(unpatchify(&t, Kernel::square(4), LatentDims::new(8, 8, 2)).is_err());
        assert!(unpatchify(&t, Kernel::square(2), LatentDims::new(8, 8, 3)).is_err());
    }

    #[test]
    fn admissibility_rule() {
        let dims = LatentDims::new(8, 8, 32);
        let cfg = |c| PatchifyConfig::new(Kernel::square(c), dims, 768).unwrap();
        assert!(kernel_admissible(&cfg(4)));
        assert!(!kernel_admissible(&cfg(8)));
        assert!(kernel_admissible(&cfg(1)));
    }

    #[test]
    fn tokens_per_frame_exhaustive() {
        for h in 1..=16 {
            for w in 1..=16 {
                let dims = LatentDims::new(h, w, 1);
                for ch in (1..=h).filter(|c| h % c == 0) {
                    for cw in (1..=w).filter(|c| w % c == 0) {
                        let k = Kernel::new(ch, cw);
                        let f = Tensor::<f32>::zeros(&dims.shape());
                        let t = patchify(&f, k).unwrap();
                        assert_eq!(t.rows(), dims.tokens_per_frame(k));
                        assert_eq!(t.rows(), (h / ch) * (w / cw));
                    }
                }
            }
        }
    }

    #[test]
    fn sequence_bookkeeping() {
        let dims = LatentDims::new(8, 8, 2);
        let f = ramp(dims);
        let seq = TokenSequence::from_frames(
            &[&f, &f, &f],
            5,
            &[Tier::Long, Tier::Short, Tier::Short],
            Kernel::square(2),
            Kernel::square(4),
        )
        .unwrap();
        assert_eq!(seq.len(), 4 + 16 + 16);
        let fi = seq.frame_index();
        assert_eq!(&fi[..5], &[5, 5, 5, 5, 6]);
        assert_eq!(seq.tier()[3], Tier::Long);
        assert_eq!(seq.tier()[4], Tier::Short);
    }

    proptest! {
        #[test]
        fn patchify_preserves_values(seed in 0u64..500, c in prop::sample::select(vec![1usize, 2, 4])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = LatentDims::new(8, 4, 3);
            let f = Tensor::<f64>::randn(&dims.shape(), 1.0, &mut rng);
            let k = Kernel::new(c, c.min(4));
            let t = patchify(&f, k).unwrap();
            let mut a = f.data().to_vec();
            let mut b = t.data().to_vec();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}

//! Synthetic latent worlds.
//!
//! A world is a torus of `grid_size × grid_size` cells. Each cell holds one of
//! `palette_size` latent colors, chosen by hashing `(palette_seed, x, y)`, so the
//! content at a position never changes and a revisit reproduces it bit-for-bit.
//! A camera sees an `H × W` window whose top-left corner is the camera position.
//!
//! Episodes follow a loop-closure schedule: the first half walks out and
//! retraces its steps back to the start by `T/2`; the second half replays the
//! first half's actions, so frame `t` equals frame `t - T/2` for `t >= T/2`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::par::{self, Execution};
use crate::tokenizer::LatentDims;

/// Discrete camera moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Action {
    Stay = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Stay => (0, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            Action::Stay => Action::Stay,
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub grid_size: usize,
    pub view_h: usize,
    pub view_w: usize,
    /// Latent channels per cell.
    pub d: usize,
    pub palette_seed: u64,
    #[serde(default = "default_palette_size")]
    pub palette_size: usize,
    pub episode_length: usize,
}

fn default_palette_size() -> usize {
    16
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            grid_size: 32,
            view_h: 8,
            view_w: 8,
            d: 8,
            palette_seed: 0,
            palette_size: default_palette_size(),
            episode_length: 64,
        }
    }
}

impl WorldSpec {
    pub fn latent(&self) -> LatentDims {
        LatentDims::new(self.view_h, self.view_w, self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.view_h == 0 || self.view_w == 0 || self.d == 0 {
            return Err(Error::Invalid("world dimensions must be positive".into()));
        }
        if self.palette_size == 0 {
            return Err(Error::Invalid("palette must have at least one color".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Invalid("episode_length must be at least 1".into()));
        }
        Ok(())
    }

    /// Latent palette: `palette_size` colors of `d` values in `[-1, 1]`.
    pub fn palette(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.palette_seed);
        (0..self.palette_size)
            .map(|_| (0..self.d).map(|_| rng.random_range(-1.0f32..=1.0)).collect())
            .collect()
    }

    /// Palette index of the cell at `(x, y)`, wrapping around the torus.
    pub fn cell(&self, x: i64, y: i64) -> usize {
        let g = self.grid_size as i64;
        let (x, y) = (x.rem_euclid(g) as u64, y.rem_euclid(g) as u64);
        let h = splitmix64(self.palette_seed ^ splitmix64(x.wrapping_mul(0x9E37_79B9) ^ splitmix64(y)));
        (h % self.palette_size as u64) as usize
    }

    /// The `[H, W, d]` view with top-left corner at `pos`.
    pub fn render(&self, palette: &[Vec<f32>], pos: (i64, i64)) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.view_h * self.view_w * self.d);
        for r in 0..self.view_h as i64 {
            for c in 0..self.view_w as i64 {
                data.extend_from_slice(&palette[self.cell(pos.0 + c, pos.1 + r)]);
            }
        }
        Tensor::new(vec![self.view_h, self.view_w, self.d], data).expect("sized above")
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A latent video with the action that produced each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `[H, W, d]` per frame.
    pub frames: Vec<Tensor<f32>>,
    /// `actions[t]` moves the camera from frame `t-1` to frame `t`; `actions[0]` is `Stay`.
    pub actions: Vec<Action>,
    /// Camera position of every frame.
    pub trajectory: Vec<(i64, i64)>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn action_ids(&self) -> Vec<usize> {
        self.actions.iter().map(|&a| a as usize).collect()
    }

    /// Frames `start..end` converted to the working dtype.
    pub fn frames_as<F: Scalar>(&self, start: usize, end: usize) -> Vec<Tensor<F>> {
        self.frames[start..end].iter().map(|f| f.cast()).collect()
    }
}

/// Renders the episode produced by a fixed action list from `start`.
pub fn episode_from_actions(spec: &WorldSpec, start: (i64, i64), actions: &[Action]) -> Result<Episode> {
    spec.validate()?;
    if actions.is_empty() {
        return Err(Error::Invalid("an episode needs at least one frame".into()));
    }
    let palette = spec.palette();
    let mut pos = start;
    let mut trajectory = Vec::with_capacity(actions.len());
    let mut frames = Vec::with_capacity(actions.len());
    for (t, &a) in actions.iter().enumerate() {
        if t > 0 {
            let (dx, dy) = a.delta();
            pos = (pos.0 + dx, pos.1 + dy);
        }
        trajectory.push(pos);
        frames.push(spec.render(&palette, pos));
    }
    let mut actions = actions.to_vec();
    actions[0] = Action::Stay;
    Ok(Episode {
        frames,
        actions,
        trajectory,
    })
}

/// Loop-closure action schedule of length `len`.
pub fn loop_closure_actions(len: usize, rng: &mut impl Rng) -> Vec<Action> {
    let half = len / 2;
    let mut actions = vec![Action::Stay; len];
    // Moves 1..=half: walk out `out` steps, retrace them, pad with stays, so the
    // camera is home again at frame `half`.
    let out = half / 2;
    let walk: Vec<Action> = (0..out)
        .map(|_| Action::ALL[rng.random_range(0..Action::COUNT)])
        .collect();
    for (i, &a) in walk.iter().enumerate() {
        actions[1 + i] = a;
    }
    for (i, &a) in walk.iter().rev().enumerate() {
        actions[1 + out + i] = a.inverse();
    }
    // Frame half+s then sits where frame s did.
    for t in half + 1..len {
        actions[t] = actions[t - half];
    }
    actions[0] = Action::Stay;
    actions
}

/// Deterministic episode for `seed`: random start, loop-closure walk.
pub fn generate_episode(spec: &WorldSpec, seed: u64) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = spec.grid_size as i64;
    let start = (rng.random_range(0..g), rng.random_range(0..g));
    let actions = loop_closure_actions(spec.episode_length, &mut rng);
    episode_from_actions(spec, start, &actions)
}

fn episode_seed(seed: u64, i: usize) -> u64 {
    splitmix64(seed ^ splitmix64(i as u64 + 1))
}

/// `count` episodes, generated independently (in parallel when enabled).
pub fn generate_dataset(spec: &WorldSpec, count: usize, seed: u64, exec: Execution) -> Result<Dataset> {
    spec.validate()?;
    let episodes = par::map_indices(exec, count, |i| generate_episode(spec, episode_seed(seed, i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub episodes: Vec<Episode>,
}

pub const DATA_MAGIC: &[u8; 4] = b"FARD";
pub const DATA_VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "dataset",
        reason: reason.into(),
    }
}

impl Dataset {
    /// Container layout, little-endian:
    /// `"FARD"`, u32 version, u32 spec length, spec JSON, u32 episode count, then
    /// per episode u32 T, i64 start x, i64 start y, `T·H·W·d` f32 latents, `T` action bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = serde_json::to_vec(&self.spec)?;
        let frame_len = self.spec.latent().frame_len();
        let mut out = Vec::with_capacity(
            16 + spec.len() + self.episodes.iter().map(|e| 20 + e.len() * (frame_len * 4 + 1)).sum::<usize>(),
        );
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        for ep in &self.episodes {
            out.extend_from_slice(&(ep.len() as u32).to_le_bytes());
            let start = ep.trajectory.first().copied().unwrap_or((0, 0));
            out.extend_from_slice(&start.0.to_le_bytes());
            out.extend_from_slice(&start.1.to_le_bytes());
            for f in &ep.frames {
                if f.len() != frame_len {
                    return Err(Error::shape("dataset frame", f.shape(), &self.spec.latent().shape()));
                }
                for &v in f.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.extend(ep.actions.iter().map(|&a| a as u8));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(bad(format!("truncated at byte {pos}")));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != DATA_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != DATA_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let spec_len = u32_at(take(4)?) as usize;
        let spec: WorldSpec =
            serde_json::from_slice(take(spec_len)?).map_err(|e| bad(format!("spec: {e}")))?;
        spec.validate().map_err(|e| bad(e.to_string()))?;
        let dims = spec.latent();
        let frame_len = dims.frame_len();
        let count = u32_at(take(4)?) as usize;
        let mut episodes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let t = u32_at(take(4)?) as usize;
            let sx = i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let sy = i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let raw = take(
                t.checked_mul(frame_len * 4)
                    .ok_or_else(|| bad("episode size overflow"))?,
            )?;
            let frames = raw
                .chunks_exact(frame_len * 4)
                .map(|fb| {
                    let data = fb
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::new(dims.shape().to_vec(), data).expect("sized above")
                })
                .collect();
            let actions = take(t)?
                .iter()
                .map(|&b| Action::from_u8(b).ok_or_else(|| bad(format!("unknown action byte {b}"))))
                .collect::<Result<Vec<_>>>()?;
            let mut p = (sx, sy);
            let trajectory = actions
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    if i > 0 {
                        let (dx, dy) = a.delta();
                        p = (p.0 + dx, p.1 + dy);
                    }
                    p
                })
                .collect();
            episodes.push(Episode {
                frames,
                actions,
                trajectory,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Dataset { spec, episodes })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One channel of a `[H, W, d]` frame as a binary PGM, mapping `[-1, 1]` to `[0, 255]`.
pub fn frame_to_pgm<F: Scalar>(frame: &Tensor<F>, channel: usize) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 || channel >= s[2] {
        return Err(Error::Invalid(format!(
            "channel {channel} of frame with shape {s:?}"
        )));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        let v = frame.data()[i * d + channel].as_f64();
        out.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
    }
    Ok(out)
}

/// Writes every channel of every frame as `{prefix}_f{t:03}_c{c}.pgm`.
pub fn dump_pgm<F: Scalar>(frames: &[Tensor<F>], dir: &Path, prefix: &str) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for (t, f) in frames.iter().enumerate() {
        let d = f.shape().get(2).copied().unwrap_or(0);
        for c in 0..d {
            let path = dir.join(format!("{prefix}_f{t:03}_c{c}.pgm"));
            fs::write(&path, frame_to_pgm(f, c)?).map_err(|e| Error::io(&path, e))?;
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> WorldSpec {
        WorldSpec {
            grid_size: 16,
            episode_length: 16,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn stay_gives_identical_frames() {
        let spec = small();
        let ep = episode_from_actions(&spec, (3, 5), &[Action::Stay; 10]).unwrap();
        assert!(ep.frames.iter().all(|f| f == &ep.frames[0]));
    }

    #[test]
    fn loop_closure_revisits_are_bit_exact() {
        let spec = small();
        for seed in 0..20 {
            let ep = generate_episode(&spec, seed).unwrap();
            let h = spec.episode_length / 2;
            assert_eq!(ep.trajectory[h], ep.trajectory[0]);
            assert_eq!(ep.frames[h], ep.frames[0]);
            for t in h..ep.len() {
                assert_eq!(ep.frames[t], ep.frames[t - h]);
            }
        }
    }

    #[test]
    fn frames_follow_trajectory() {
        let spec = small();
        let ep = generate_episode(&spec, 7).unwrap();
        let palette = spec.palette();
        let mut pos = ep.trajectory[0];
        for t in 0..ep.len() {
            if t > 0 {
                let (dx, dy) = ep.actions[t].delta();
                pos = (pos.0 + dx, pos.1 + dy);
            }
            assert_eq!(ep.trajectory[t], pos);
            assert_eq!(ep.frames[t], spec.render(&palette, pos));
        }
    }

    #[test]
    fn world_wraps_and_is_pure() {
        let spec = small();
        let g = spec.grid_size as i64;
        assert_eq!(spec.cell(2, 3), spec.cell(2 + g, 3 - g));
        assert_eq!(spec.cell(-1, 0), spec.cell(g - 1, 0));
        let values: Vec<f32> = spec.palette().concat();
        assert!(values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let spec = small();
        assert_eq!(generate_episode(&spec, 11).unwrap(), generate_episode(&spec, 11).unwrap());
        let a = generate_dataset(&spec, 4, 1, Execution::Parallel).unwrap();
        let b = generate_dataset(&spec, 4, 1, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_episodes() {
        let spec = WorldSpec {
            episode_length: 1,
            ..small()
        };
        let ep = generate_episode(&spec, 0).unwrap();
        assert_eq!(ep.len(), 1);
        assert_eq!(ep.actions, vec![Action::Stay]);
        for len in 2..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
            let a = loop_closure_actions(len, &mut rng);
            assert_eq!(a.len(), len);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let spec = small();
        let ds = generate_dataset(&spec, 3, 5, Execution::Parallel).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fard");
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_dataset_is_an_error() {
        let ds = generate_dataset(&small(), 2, 0, Execution::Sequential).unwrap();
        let bytes = ds.to_bytes().unwrap();
        for cut in [0, 2, 8, 20, bytes.len() / 3, bytes.len() - 1] {
            assert!(matches!(Dataset::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut corrupt = bytes.clone();
        corrupt[0] = b'Z';
        assert!(Dataset::from_bytes(&corrupt).is_err());
    }

    #[test]
    fn smoke_dataset_size() {
        let spec = WorldSpec {
            episode_length: 64,
            ..WorldSpec::default()
        };
        let bytes = generate_dataset(&spec, 8, 0, Execution::Parallel)
            .unwrap()
            .to_bytes()
            .unwrap();
        let payload = 8 * 64 * (8 * 8 * 8 * 4 + 1);
        assert!(bytes.len() >= payload);
        assert!(bytes.len() <= 10 * 1024 * 1024);
    }

    #[test]
    fn pgm_maps_range() {
        let f = Tensor::new(vec![1, 2, 1], vec![-1.0f32, 1.0]).unwrap();
        let pgm = frame_to_pgm(&f, 0).unwrap();
        assert!(pgm.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 2..], &[0, 255]);
        assert!(frame_to_pgm(&f, 1).is_err());
    }

    proptest! {
        #[test]
        fn any_action_sequence_retraced_returns_home(moves in proptest::collection::vec(0u8..5, 1..12)) {
            let spec = small();
            let mut actions = vec![Action::Stay];
            let walk: Vec<Action> = moves.iter().map(|&m| Action::from_u8(m).unwrap()).collect();
            actions.extend(walk.iter().copied());
            actions.extend(walk.iter().rev().map(|a| a.inverse()));
            let ep = episode_from_actions(&spec, (0, 0), &actions).unwrap();
            prop_assert_eq!(ep.frames.last().unwrap(), &ep.frames[0]);
        }
    }
}

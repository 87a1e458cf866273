//! Synthetic directed-motion clips and the `TTSD` clip container.
//!
//! A bright square translates across the frame. Classes come in reversal
//! pairs (up/down, left/right): each "down" clip is the frame-reversed copy
//! of a freshly drawn "up" clip before noise is added, so the two classes of
//! a pair have the same distribution of individual frames and differ only in
//! temporal order.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "TTSD" | version u32 | count u32 |
//!   per clip: id u64 | label u32 | N u32 | C u32 | H u32 | W u32 | N·C·H·W × f64
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binfmt::{put_f64s, put_u32, put_u64, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTSD";
pub const VERSION: u32 = 1;
pub const CHANNELS: usize = 3;
pub const SQUARE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionClass {
    pub id: usize,
    pub direction: Direction,
    pub partner: usize,
}

const DIRECTIONS: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

/// Class table for 2 (up/down) or 4 (up/down/left/right) classes.
pub fn motion_classes(count: usize) -> Result<Vec<MotionClass>> {
    if count != 2 && count != 4 {
        return Err(Error::Config(format!(
            "directed-motion data supports 2 or 4 classes, got {count}"
        )));
    }
    Ok(DIRECTIONS[..count]
        .iter()
        .enumerate()
        .map(|(id, &direction)| MotionClass {
            id,
            direction,
            partner: id ^ 1,
        })
        .collect())
}

/// Class id of the reversal partner of `class`.
pub fn partner(class: usize) -> usize {
    class ^ 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    /// [N, C, H, W] with values in [0, 1].
    pub frames: Tensor,
    pub label: usize,
    pub clip_id: u64,
}

impl ClipRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            per_class: 100,
            frames: 8,
            height: 32,
            width: 32,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

/// Default test-split size per class.
pub const DEFAULT_TEST_PER_CLASS: usize = 30;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        motion_classes(self.classes)?;
        if self.frames < 4 {
            return Err(Error::Config(format!(
                "reversal-pair dataset requires N >= 4 frames, got {}",
                self.frames
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "frames must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        let shortest = self.height.min(self.width);
        if shortest - SQUARE < self.frames - 1 {
            return Err(Error::Config(format!(
                "{} frames of motion do not fit in {shortest} pixels",
                self.frames
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Matching held-out split: same geometry, derived seed, `per_class` clips per class.
    pub fn test_split(&self, per_class: usize) -> SynthConfig {
        SynthConfig {
            per_class,
            seed: self.seed ^ 0x7e57_5eed_0000_0001,
            ..*self
        }
    }
}

/// Pixels moved per frame along an axis of length `extent`.
fn speed(extent: usize, frames: usize) -> usize {
    ((extent - SQUARE) * 3 / 4 / (frames - 1)).max(1)
}

/// Noise-free clip of a square moving up (vertical) or left (horizontal).
fn base_clip(cfg: &SynthConfig, vertical: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let (along, across) = if vertical { (h, w) } else { (w, h) };
    let v = speed(along, n);
    let travel = v * (n - 1);
    let start = rng.gen_range(0..=along - SQUARE - travel) + travel;
    let lateral = rng.gen_range(0..=across - SQUARE);
    let color: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(0.6..1.0));

    let mut frames = Tensor::zeros(&[n, CHANNELS, h, w]);
    let data = frames.data_mut();
    for t in 0..n {
        let pos = start - v * t;
        let (y0, x0) = if vertical { (pos, lateral) } else { (lateral, pos) };
        for (c, &value) in color.iter().enumerate() {
            for y in y0..y0 + SQUARE {
                for x in x0..x0 + SQUARE {
                    data[((t * CHANNELS + c) * h + y) * w + x] = value;
                }
            }
        }
    }
    frames
}

/// Reverses the leading (frame) axis of an [N, …] tensor.
pub fn reverse_frames(frames: &Tensor) -> Tensor {
    let n = frames.shape()[0];
    let len = frames.numel() / n;
    let data = frames.data().chunks(len).rev().flatten().copied().collect();
    Tensor::new(frames.shape().to_vec(), data).expect("same shape")
}

fn add_noise(frames: &mut Tensor, std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    let dist = Normal::new(0.0, std).expect("validated std");
    for v in frames.data_mut() {
        *v = (*v + dist.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Generates `classes × per_class` clips. Partner clips are interleaved and
/// clip ids are consecutive from zero.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let classes = motion_classes(cfg.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clips = Vec::with_capacity(cfg.classes * cfg.per_class);
    for pair in classes.chunks(2) {
        let vertical = pair[0].direction == Direction::Up;
        for _ in 0..cfg.per_class {
            let forward = base_clip(cfg, vertical, &mut rng);
            let backward = reverse_frames(&forward);
            for (frames, class) in [(forward, pair[0].id), (backward, pair[1].id)] {
                let mut frames = frames;
                add_noise(&mut frames, cfg.noise_std, &mut rng);
                clips.push(ClipRecord {
                    frames,
                    label: class,
                    clip_id: clips.len() as u64,
                });
            }
        }
    }
    Ok(clips)
}

/// Copy of `clips` with each clip's frames randomly permuted.
pub fn shuffle_frames(clips: &[ClipRecord], seed: u64) -> Vec<ClipRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clips
        .iter()
        .map(|clip| {
            let n = clip.num_frames();
            let len = clip.frames.numel() / n;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let data = order
                .iter()
                .flat_map(|&f| clip.frames.data()[f * len..(f + 1) * len].iter().copied())
                .collect();
            ClipRecord {
                frames: Tensor::new(clip.frames.shape().to_vec(), data).expect("same shape"),
                ..clip.clone()
            }
        })
        .collect()
}

/// Stacks clips into a [B, N, C, H, W] batch.
pub fn stack_clips(clips: &[&ClipRecord]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero clips".into()))?;
    let frame_shape = first.frames.shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.frames.numel());
    for clip in clips {
        if clip.frames.shape() != frame_shape.as_slice() {
            return Err(Error::dim("stack_clips", &frame_shape, clip.frames.shape()));
        }
        data.extend_from_slice(clip.frames.data());
    }
    let mut shape = vec![clips.len()];
    shape.extend(frame_shape);
    Tensor::new(shape, data)
}

pub fn encode_clips(clips: &[ClipRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(clips.len(), "clip count")?);
    for clip in clips {
        if clip.frames.rank() != 4 {
            return Err(Error::dim("encode_clips", clip.frames.shape(), &[0, 0, 0, 0]));
        }
        put_u64(&mut out, clip.clip_id);
        put_u32(&mut out, to_u32(clip.label, "label")?);
        for &d in clip.frames.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        put_f64s(&mut out, clip.frames.data());
    }
    Ok(out)
}

pub fn decode_clips(bytes: &[u8]) -> Result<Vec<ClipRecord>> {
    let mut r = ByteReader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let count = r.u32("clip count")? as usize;
    let mut clips = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let clip_id = r.u64("clip id")?;
        let label = r.u32("label")? as usize;
        let mut shape = Vec::with_capacity(4);
        for _ in 0..4 {
            shape.push(r.u32("clip shape")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Malformed(format!("clip shape {shape:?} overflows")))?;
        let data = r.f64s(numel, "frame data")?;
        let frames = Tensor::new(shape, data).map_err(|e| Error::Malformed(e.to_string()))?;
        clips.push(ClipRecord {
            frames,
            label,
            clip_id,
        });
    }
    if !r.is_empty() {
        return Err(Error::Malformed("trailing bytes after last clip".into()));
    }
    Ok(clips)
}

pub fn write_clips(path: impl AsRef<Path>, clips: &[ClipRecord]) -> Result<()> {
    fs::write(path, encode_clips(clips)?)?;
    Ok(())
}

pub fn read_clips(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    decode_clips(&fs::read(path)?)
}

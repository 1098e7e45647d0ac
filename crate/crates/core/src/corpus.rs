//! Seeded synthetic corpus of single moving shapes.
//!
//! Each clip is an RGB video in `[-1, 1]` of one colored shape sliding over a
//! faint static texture, with its exact per-frame footprint mask, a source
//! prompt describing it and a target prompt that changes its color or shape.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::{self, Bundle, ByteTensor, Manifest};
use crate::tensor::{Real, Tensor};
use crate::vocab::{self, COLORS, MOTIONS, SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        SHAPES[self as usize]
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }

    /// Whether pixel `(dy, dx)` of a `size`-wide bounding box is covered.
    fn covers(self, dy: usize, dx: usize, size: usize) -> bool {
        let c = size as f64 / 2.0;
        let (y, x) = (dy as f64 + 0.5 - c, dx as f64 + 0.5 - c);
        match self {
            Shape::Square => true,
            Shape::Circle => y * y + x * x <= c * c,
            Shape::Diamond => y.abs() + x.abs() <= c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];

    pub fn name(self) -> &'static str {
        MOTIONS[self as usize]
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion {s:?}")))
    }

    /// Unit displacement per frame as `(dy, dx)`.
    pub fn step(self) -> (isize, isize) {
        match self {
            Motion::Left => (0, -1),
            Motion::Right => (0, 1),
            Motion::Up => (-1, 0),
            Motion::Down => (1, 0),
            Motion::Still => (0, 0),
        }
    }
}

/// RGB in `[0, 1]`, indexed like the vocabulary color list.
const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 0.85, 0.15],
    [0.15, 0.25, 1.0],
    [1.0, 0.95, 0.1],
    [1.0, 1.0, 1.0],
    [0.6, 0.1, 0.8],
    [1.0, 0.55, 0.0],
    [0.1, 0.9, 0.9],
];

pub fn color_index(name: &str) -> Result<usize> {
    COLORS
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Config(format!("unknown color {name:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Color,
    Shape,
    /// Even clips recolor, odd clips reshape.
    Mixed,
}

impl EditKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(EditKind::Color),
            "shape" => Ok(EditKind::Shape),
            "mixed" => Ok(EditKind::Mixed),
            _ => Err(Error::Config(format!("unknown edit kind {s:?}"))),
        }
    }
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::Color => "color",
            EditKind::Shape => "shape",
            EditKind::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub clips: usize,
    pub frames: usize,
    /// Square pixel side.
    pub size: usize,
    /// Pixel-to-latent average-pool factor.
    pub pool: usize,
    pub object_size: usize,
    /// Pixels per frame.
    pub speed: usize,
    pub edit: EditKind,
    /// Prompt with `{color}`, `{shape}` and `{motion}` placeholders.
    pub template: String,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            clips: 10,
            frames: 8,
            size: 32,
            pool: 2,
            object_size: 8,
            speed: 2,
            edit: EditKind::Mixed,
            template: "a {color} {shape} moving {motion}".into(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub const KEYS: [&'static str; 9] = [
        "clips", "frames", "size", "pool", "object_size", "speed", "edit", "template", "seed",
    ];

    /// Reads a `key=value` spec; absent keys keep their defaults.
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let mut s = CorpusSpec::default();
        for (k, v) in &m.entries {
            let num = || v.parse::<usize>().map_err(|_| Error::Config(format!("{k}: expected an integer, got {v:?}")));
            match k.as_str() {
                "clips" => s.clips = num()?,
                "frames" => s.frames = num()?,
                "size" => s.size = num()?,
                "pool" => s.pool = num()?,
                "object_size" => s.object_size = num()?,
                "speed" => s.speed = num()?,
                "edit" => s.edit = EditKind::parse(v)?,
                "template" => s.template = v.clone(),
                "seed" => s.seed = v.parse().map_err(|_| Error::Config(format!("seed: expected an integer, got {v:?}")))?,
                _ => return Err(Error::Config(format!("unknown corpus key {k:?}"))),
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 || self.size == 0 || self.pool == 0 || self.object_size == 0 {
            return Err(Error::Config("clips, frames, size, pool and object_size must be positive".into()));
        }
        if !self.size.is_multiple_of(self.pool) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by pooling factor {}",
                self.size, self.pool
            )));
        }
        if self.object_size + self.speed * (self.frames - 1) > self.size {
            return Err(Error::Config(format!(
                "a {}px object moving {}px/frame for {} frames leaves a {}px frame",
                self.object_size, self.speed, self.frames, self.size
            )));
        }
        for key in ["{color}", "{shape}", "{motion}"] {
            if !self.template.contains(key) {
                return Err(Error::Config(format!("template lacks {key}")));
            }
        }
        let probe = prompt(&self.template, "red", "square", Motion::Right);
        if !vocab::is_known(&probe) {
            return Err(Error::Config(format!("template {:?} uses words outside the vocabulary", self.template)));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.size / self.pool
    }
}

fn prompt(template: &str, color: &str, shape: &str, motion: Motion) -> String {
    let p = template.replace("{color}", color).replace("{shape}", shape);
    if motion == Motion::Still {
        p.replace("moving {motion}", "still").replace("{motion}", "still")
    } else {
        p.replace("{motion}", motion.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpec {
    pub color: usize,
    pub shape: Shape,
    pub motion: Motion,
    /// Top-left corner of the bounding box in frame 0, `(y, x)`.
    pub start: (usize, usize),
    pub target_color: usize,
    pub target_shape: Shape,
    /// Background texture phase.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip<F> {
    pub spec: ClipSpec,
    /// `[f, S, S, 3]`.
    pub video: Tensor<F>,
    /// `[f, S, S]`, 1 on the shape footprint.
    pub mask: ByteTensor,
    pub source_prompt: String,
    pub target_prompt: String,
}

fn background(y: usize, x: usize, phase: f64) -> f64 {
    0.15 + 0.05 * (0.7 * x as f64 + 0.4 * y as f64 + phase).sin()
}

/// Draws `clip` into a `[f, S, S, 3]` video and its footprint mask.
pub fn render<F: Real>(clip: &ClipSpec, spec: &CorpusSpec) -> Result<(Tensor<F>, ByteTensor)> {
    let (f, s, o) = (spec.frames, spec.size, spec.object_size);
    let (sy, sx) = clip.motion.step();
    let mut video = Vec::with_capacity(f * s * s * 3);
    let mut mask = Vec::with_capacity(f * s * s);
    let rgb = PALETTE[clip.color];
    for i in 0..f {
        let oy = clip.start.0 as isize + sy * (spec.speed * i) as isize;
        let ox = clip.start.1 as isize + sx * (spec.speed * i) as isize;
        if oy < 0 || ox < 0 || oy as usize + o > s || ox as usize + o > s {
            return Err(Error::Config(format!("trajectory leaves the frame at frame {i}")));
        }
        let (oy, ox) = (oy as usize, ox as usize);
        for y in 0..s {
            for x in 0..s {
                let inside = (oy..oy + o).contains(&y)
                    && (ox..ox + o).contains(&x)
                    && clip.shape.covers(y - oy, x - ox, o);
                mask.push(u8::from(inside));
                for c in 0..3 {
                    let v = if inside { rgb[c] } else { background(y, x, clip.phase) };
                    video.push(F::of(2.0 * v - 1.0));
                }
            }
        }
    }
    Ok((Tensor::new(vec![f, s, s, 3], video)?, ByteTensor::new(vec![f, s, s], mask)?))
}

/// Deterministic corpus for `spec`.
pub fn gen_corpus<F: Real>(spec: &CorpusSpec) -> Result<Vec<Clip<F>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (s, o) = (spec.size, spec.object_size);
    let travel = spec.speed * (spec.frames - 1);
    let mut out = Vec::with_capacity(spec.clips);
    for k in 0..spec.clips {
        let color = rng.random_range(0..COLORS.len());
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let motion = Motion::ALL[rng.random_range(0..Motion::ALL.len())];
        let (sy, sx) = motion.step();
        // even coordinates keep the footprint aligned with the latent grid
        let mut pick = |moving: bool, backwards: bool| {
            let span = s - o - if moving { travel } else { 0 };
            let v = rng.random_range(0..=span / spec.pool) * spec.pool;
            if moving && backwards { v + travel } else { v }
        };
        let y = pick(sy != 0, sy < 0);
        let x = pick(sx != 0, sx < 0);
        let recolor = match spec.edit {
            EditKind::Color => true,
            EditKind::Shape => false,
            EditKind::Mixed => k % 2 == 0,
        };
        let (mut target_color, mut target_shape) = (color, shape);
        if recolor {
            target_color = (color + rng.random_range(1..COLORS.len())) % COLORS.len();
        } else {
            target_shape = Shape::ALL[(shape as usize + rng.random_range(1..Shape::ALL.len())) % Shape::ALL.len()];
        }
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let clip = ClipSpec {
            color,
            shape,
            motion,
            start: (y, x),
            target_color,
            target_shape,
            phase,
        };
        let (video, mask) = render(&clip, spec)?;
        out.push(Clip {
            source_prompt: prompt(&spec.template, COLORS[color], shape.name(), motion),
            target_prompt: prompt(&spec.template, COLORS[target_color], target_shape.name(), motion),
            spec: clip,
            video,
            mask,
        });
    }
    Ok(out)
}

/// `pool × pool` average pooling of `[f, H, W, C]`.
pub fn to_latent<F: Real>(video: &Tensor<F>, pool: usize) -> Result<Tensor<F>> {
    let &[f, h, w, c] = video.shape() else {
        return Err(Error::Contract(format!("expected a [f, H, W, C] video, got {:?}", video.shape())));
    };
    if pool == 0 || h % pool != 0 || w % pool != 0 {
        return Err(Error::Config(format!("{h}x{w} frames are not divisible by pooling factor {pool}")));
    }
    let (lh, lw) = (h / pool, w / pool);
    let norm = F::one() / F::of((pool * pool) as f64);
    let v = video.data();
    let mut out = Vec::with_capacity(f * lh * lw * c);
    for i in 0..f {
        for y in 0..lh {
            for x in 0..lw {
                for ch in 0..c {
                    let mut acc = F::zero();
                    for dy in 0..pool {
                        for dx in 0..pool {
                            acc += v[((i * h + y * pool + dy) * w + x * pool + dx) * c + ch];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
    }
    Tensor::new(vec![f, lh, lw, c], out)
}

/// Writes one bundle per clip (`clip_000`, ...) plus a corpus manifest.
pub fn write_corpus<F: Real>(dir: impl AsRef<Path>, spec: &CorpusSpec, clips: &[Clip<F>]) -> Result<()> {
    let dir = dir.as_ref();
    let mut top = Manifest::default();
    top.insert("clips", clips.len().to_string());
    top.insert("frames", spec.frames.to_string());
    top.insert("size", spec.size.to_string());
    top.insert("pool", spec.pool.to_string());
    top.insert("seed", spec.seed.to_string());
    for (k, clip) in clips.iter().enumerate() {
        let name = format!("clip_{k:03}");
        let sub = dir.join(&name);
        let mut b = Bundle::default();
        b.meta.insert("source_prompt".into(), clip.source_prompt.clone());
        b.meta.insert("target_prompt".into(), clip.target_prompt.clone());
        b.meta.insert("motion".into(), clip.spec.motion.name().into());
        b.meta.insert("speed".into(), spec.speed.to_string());
        b.tensors.insert("video".into(), clip.video.clone());
        b.tensors.insert("latent".into(), to_latent(&clip.video, spec.pool)?);
        b.write(&sub)?;
        formats::write_byte_tensor(sub.join("mask.strm"), &clip.mask)?;
        top.insert(name, format!("{} -> {}", clip.source_prompt, clip.target_prompt));
    }
    top.write(dir.join(formats::MANIFEST))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mask_area() {
        let spec = CorpusSpec {
            seed: 7,
            edit: EditKind::Color,
            ..CorpusSpec::default()
        };
        let a = gen_corpus::<f64>(&spec).unwrap();
        let b = gen_corpus::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        for clip in &a {
            let area = (0..8)
                .flat_map(|dy| (0..8).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| clip.spec.shape.covers(dy, dx, 8))
                .count();
            let sum: usize = clip.mask.data.iter().map(|&m| m as usize).sum();
            assert_eq!(sum, area * spec.frames);
            assert!(vocab::is_known(&clip.source_prompt) && vocab::is_known(&clip.target_prompt));
            assert_ne!(clip.source_prompt, clip.target_prompt);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = CorpusSpec { size: 33, ..CorpusSpec::default() };
        assert!(matches!(gen_corpus::<f32>(&bad), Err(Error::Config(_))));
        let bad = CorpusSpec { frames: 16, ..CorpusSpec::default() };
        assert!(matches!(gen_corpus::<f32>(&bad), Err(Error::Config(_))));
        let bad = CorpusSpec { template: "a {color} zebra {shape} {motion}".into(), ..CorpusSpec::default() };
        assert!(matches!(gen_corpus::<f32>(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn latent_pooling_averages_blocks() {
        let v = Tensor::<f64>::from_fn(&[1, 2, 2, 1], |k| k as f64);
        assert_eq!(to_latent(&v, 2).unwrap().data(), &[1.5]);
    }
}

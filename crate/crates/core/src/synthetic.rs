//! Moving-square clips whose class is carried only by the motion trajectory.
//!
//! A clip is a static textured background plus a textured square that moves on
//! a torus (positions wrap around the frame edges). Texture, start position and
//! background are drawn independently of the class, so any single frame has
//! the same distribution for every class.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::io::{write_clip, Manifest, MANIFEST_NAME};
use crate::train::derive_seed;

/// Motion archetypes. The first six have a fixed direction; the rest draw
/// their heading (or turning sense) per clip, so the class is carried by the
/// kind of motion rather than its direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    TranslateRight,
    TranslateLeft,
    TranslateUp,
    TranslateDown,
    ClockwiseOrbit,
    CounterClockwiseOrbit,
    Static,
    /// Half of `speed` along the clip's heading.
    SlowTranslate,
    /// One and a half times `speed` along the clip's heading.
    FastTranslate,
    /// Circle of `orbit_radius` in the clip's turning sense.
    Orbit,
    /// One sine period of amplitude `orbit_radius` along the heading.
    Oscillate,
    /// Steps of length `speed` in directions drawn per frame.
    RandomWalk,
}

impl Motion {
    /// Classes related by flips and rotations of one another.
    pub const DIRECTIONAL: [Motion; 6] = [
        Motion::TranslateRight,
        Motion::TranslateLeft,
        Motion::TranslateUp,
        Motion::TranslateDown,
        Motion::ClockwiseOrbit,
        Motion::CounterClockwiseOrbit,
    ];

    /// Classes whose identity survives any flip or rotation of the clip.
    pub const KINDS: [Motion; 6] = [
        Motion::Static,
        Motion::SlowTranslate,
        Motion::FastTranslate,
        Motion::Orbit,
        Motion::Oscillate,
        Motion::RandomWalk,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_clips: usize,
    pub classes: Vec<Motion>,
    /// (C, T, H, W)
    pub shape: [usize; 4],
    /// Amplitude of the static background texture.
    pub texture_noise: f64,
    pub seed: u64,
    pub square_size: usize,
    /// Pixels per frame for translations.
    pub speed: f64,
    pub orbit_radius: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_clips: 200,
            classes: Motion::KINDS.to_vec(),
            shape: [3, 8, 20, 20],
            texture_noise: 0.3,
            seed: 0,
            square_size: 6,
            speed: 2.0,
            orbit_radius: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(StcrError::Config("at least one motion class is required".into()));
        }
        if self.shape.contains(&0) {
            return Err(StcrError::Config("clip shape must be positive".into()));
        }
        let [_, _, h, w] = self.shape;
        if self.square_size == 0 || self.square_size > h.min(w) {
            return Err(StcrError::Config("square must fit inside the frame".into()));
        }
        if !(self.texture_noise >= 0.0) {
            return Err(StcrError::Config("texture_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn label_of(&self, index: usize) -> usize {
        index % self.classes.len()
    }
}

/// Everything that determines one rendered clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecipe {
    pub motion: Motion,
    /// C×H×W static background, ordered (c, h, w).
    pub background: Vec<f64>,
    /// C×S×S square texture, ordered (c, y, x).
    pub texture: Vec<f64>,
    /// Square position (row, col) at frame 0, for every motion.
    pub anchor: (f64, f64),
    /// Orbit start angle in radians.
    pub phase: f64,
    /// Direction of travel in radians.
    pub heading: f64,
    /// +1 or -1: turning sense for `Orbit`.
    pub spin: f64,
    /// One direction in radians per frame transition, for `RandomWalk`.
    pub walk: Vec<f64>,
}

/// Draws the class-independent parts of clip `index`. The draw sequence does
/// not depend on the motion.
pub fn sample_recipe(spec: &SyntheticSpec, index: usize) -> ClipRecipe {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[index as u64]));
    let [c, _, h, w] = spec.shape;
    let s = spec.square_size;
    let background = (0..c * h * w)
        .map(|_| spec.texture_noise * rng.random::<f64>())
        .collect();
    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.0)).collect();
    let texture = (0..c * s * s)
        .map(|i| base[i / (s * s)] + spec.texture_noise * (rng.random::<f64>() - 0.5))
        .collect();
    let anchor = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
    let phase = rng.random_range(0.0..2.0 * PI);
    let heading = rng.random_range(0.0..2.0 * PI);
    let spin = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let walk = (1..spec.shape[1]).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    ClipRecipe {
        motion: spec.classes[spec.label_of(index)],
        background,
        texture,
        anchor,
        phase,
        heading,
        spin,
        walk,
    }
}

/// Top-left corner of the square in frame `t`, before wrapping.
fn position(spec: &SyntheticSpec, recipe: &ClipRecipe, t: usize) -> (i64, i64) {
    let (r0, c0) = recipe.anchor;
    let d = spec.speed * t as f64;
    // angular step chosen so an orbit's chord roughly matches the translation speed
    let omega = 2.0 * (spec.speed / (2.0 * spec.orbit_radius)).clamp(-1.0, 1.0).asin();
    let orbit = |dir: f64| {
        let a = recipe.phase + dir * omega * t as f64;
        (
            r0 + spec.orbit_radius * (a.sin() - recipe.phase.sin()),
            c0 + spec.orbit_radius * (a.cos() - recipe.phase.cos()),
        )
    };
    let along = |dist: f64| (r0 + dist * recipe.heading.sin(), c0 + dist * recipe.heading.cos());
    let (r, c) = match recipe.motion {
        Motion::TranslateRight => (r0, c0 + d),
        Motion::TranslateLeft => (r0, c0 - d),
        Motion::TranslateUp => (r0 - d, c0),
        Motion::TranslateDown => (r0 + d, c0),
        // rows grow downwards, so increasing angle turns clockwise on screen
        Motion::ClockwiseOrbit => orbit(1.0),
        Motion::CounterClockwiseOrbit => orbit(-1.0),
        Motion::Static => (r0, c0),
        Motion::SlowTranslate => along(0.5 * d),
        Motion::FastTranslate => along(1.5 * d),
        Motion::Orbit => orbit(recipe.spin),
        Motion::Oscillate => {
            let frames = spec.shape[1] as f64;
            along(spec.orbit_radius * (2.0 * PI * t as f64 / frames).sin())
        }
        Motion::RandomWalk => recipe.walk[..t].iter().fold((r0, c0), |(r, c), a| {
            (r + spec.speed * a.sin(), c + spec.speed * a.cos())
        }),
    };
    (r.floor() as i64, c.floor() as i64)
}

/// Renders a recipe. Values are rounded to f32 so the clip survives a
/// round-trip through the clip file format unchanged.
pub fn render(spec: &SyntheticSpec, recipe: &ClipRecipe) -> Result<VideoClip> {
    let [c, tt, h, w] = spec.shape;
    let s = spec.square_size;
    let mut data = vec![0.0; c * tt * h * w];
    for t in 0..tt {
        let (pr, pc) = position(spec, recipe, t);
        for ch in 0..c {
            let frame = &mut data[(ch * tt + t) * h * w..(ch * tt + t + 1) * h * w];
            frame.copy_from_slice(&recipe.background[ch * h * w..(ch + 1) * h * w]);
            for y in 0..s {
                for x in 0..s {
                    let row = (pr + y as i64).rem_euclid(h as i64) as usize;
                    let col = (pc + x as i64).rem_euclid(w as i64) as usize;
                    frame[row * w + col] = recipe.texture[(ch * s + y) * s + x];
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    VideoClip::from_vec(spec.shape, data)
}

pub fn generate_clip(spec: &SyntheticSpec, index: usize) -> Result<(VideoClip, usize)> {
    let recipe = sample_recipe(spec, index);
    Ok((render(spec, &recipe)?, spec.label_of(index)))
}

/// The whole dataset in memory, labels following `spec.classes` order.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<(VideoClip, usize)>> {
    spec.validate()?;
    (0..spec.num_clips).map(|i| generate_clip(spec, i)).collect()
}

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index:05}.vclp")
}

/// Writes every clip plus `manifest.tsv` under `out_dir`.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| StcrError::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for i in 0..spec.num_clips {
        let (clip, label) = generate_clip(spec, i)?;
        let name = clip_file_name(i);
        write_clip(&out_dir.join(&name), &clip)?;
        manifest.entries.push((name, label));
    }
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

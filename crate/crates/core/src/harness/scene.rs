//! Procedural RGB-D scenes for segmentation.
//!
//! Class 0 is the ground plane, class 1 the sky. The remaining classes come
//! in near/far pairs that share a colour: a pair's near member sits 3–7 m
//! from the camera and its far member 12–30 m away, and far objects are
//! physically larger so that apparent sizes overlap. Colour therefore does
//! not separate the two members of a pair; depth does. The only RGB cues are
//! a faint haze on distant surfaces and the apparent frequency of a surface
//! texture, which shrinks with distance. With an odd number of object
//! classes the last class is an unpaired object with its own colour.

use crate::error::{invalid, Result};
use crate::logit::TargetMask;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const GROUND: usize = 0;
pub const SKY: usize = 1;
pub const SKY_DEPTH: f64 = 100.0;
/// Depth that maps to 1 in the normalized inverse-depth input.
pub const DEPTH_MIN: f64 = 2.0;

const NEAR_DEPTH: (f64, f64) = (3.0, 7.0);
const FAR_DEPTH: (f64, f64) = (12.0, 30.0);
const GROUND_FAR: f64 = 50.0;
const SKY_RGB: [f64; 3] = [0.55, 0.7, 0.9];
const GROUND_RGB: [f64; 3] = [0.42, 0.38, 0.3];
const PIXEL_NOISE: f64 = 0.05;
const HAZE: f64 = 0.25;
const TEXTURE_AMPLITUDE: f64 = 0.12;
/// Physical texture wavelength in pixel-metres: apparent period = this / depth.
const TEXTURE_SCALE: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `3×H×W` in `[0, 1]`.
    pub rgb: Tensor,
    /// `1×H×W` in metres.
    pub depth: Tensor,
    pub labels: TargetMask,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn width(&self) -> usize {
        self.rgb.dim(2)
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    /// Inverse depth scaled so that [`DEPTH_MIN`] maps to 1.
    pub fn depth_input(&self) -> Tensor {
        self.depth.map(|d| (DEPTH_MIN / d).min(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb.shape() != [3, h, w] || self.depth.shape() != [1, h, w] || self.labels.len() != h * w {
            return Err(invalid("scene tensors disagree on shape"));
        }
        if self.depth.data().iter().any(|&d| !(d > 0.0)) {
            return Err(invalid("scene depth must be positive"));
        }
        Ok(())
    }
}

/// Classes sharing appearance: `(near, far)` pairs.
pub fn geometry_pairs(classes: usize) -> Vec<(usize, usize)> {
    (0..(classes.saturating_sub(2)) / 2).map(|p| (2 + 2 * p, 3 + 2 * p)).collect()
}

fn pair_colour(p: usize) -> [f64; 3] {
    let hue = (0.05 + p as f64 * 0.618_034) % 1.0;
    hsv(hue, 0.75, 0.85)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum Outline {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Outline {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Outline::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Outline::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

struct Shape {
    class: usize,
    depth: f64,
    colour: [f64; 3],
    outline: Outline,
    /// Texture direction and phase.
    dir: (f64, f64),
    phase: f64,
}

pub fn generate_scene(seed: u64, height: usize, width: usize, classes: usize) -> Result<SyntheticScene> {
    if classes < 4 {
        return Err(invalid(format!("need at least 4 classes, got {classes}")));
    }
    if height < 32 || width < 32 {
        return Err(invalid(format!("scene must be at least 32×32, got {height}×{width}")));
    }
    let mut rng = Rng::new(seed, stream::SCENES);
    let (hf, wf) = (height as f64, width as f64);
    let horizon = rng.uniform(0.3, 0.45) * hf;
    let pairs = geometry_pairs(classes);
    let single = (classes - 2) % 2 == 1;
    let single_colour = hsv(0.83, 0.15, 0.95);

    let count = rng.below(3, 9);
    let scale = hf.min(wf);
    let mut shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let pick = rng.below(0, pairs.len() * 2 + usize::from(single));
            let (class, depth, base, rect) = if pick < pairs.len() * 2 {
                let (p, far) = (pick / 2, pick % 2 == 1);
                let range = if far { FAR_DEPTH } else { NEAR_DEPTH };
                let class = if far { pairs[p].1 } else { pairs[p].0 };
                (class, rng.uniform(range.0, range.1), pair_colour(p), p % 2 == 0)
            } else {
                (classes - 1, rng.uniform(NEAR_DEPTH.0, FAR_DEPTH.1), single_colour, rng.unit() < 0.5)
            };
            let jitter = [rng.normal(), rng.normal(), rng.normal()];
            let colour = [0, 1, 2].map(|c| (base[c] + 0.03 * jitter[c]).clamp(0.0, 1.0));
            let r = rng.uniform(0.07, 0.18) * scale;
            let cx = rng.uniform(0.0, wf);
            let cy = rng.uniform(horizon - 0.5 * r, hf);
            let outline = if rect {
                Outline::Rect {
                    cx,
                    cy,
                    hw: r * rng.uniform(0.7, 1.3),
                    hh: r * rng.uniform(0.7, 1.3),
                }
            } else {
                Outline::Disc { cx, cy, r }
            };
            let angle = rng.uniform(0.0, std::f64::consts::PI);
            Shape {
                class,
                depth,
                colour,
                outline,
                dir: (angle.cos(), angle.sin()),
                phase: rng.uniform(0.0, 2.0 * std::f64::consts::PI),
            }
        })
        .collect();
    // Painter's order: distant shapes first so near ones occlude them.
    shapes.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let n = height * width;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut labels = vec![0usize; n];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (mut class, mut d, mut colour) = if py < horizon {
                (SKY, SKY_DEPTH, SKY_RGB)
            } else {
                let t = (py - horizon) / (hf - horizon);
                (GROUND, GROUND_FAR + (DEPTH_MIN - GROUND_FAR) * t, GROUND_RGB)
            };
            for s in &shapes {
                if s.outline.contains(px, py) {
                    class = s.class;
                    d = s.depth;
                    let period = TEXTURE_SCALE / s.depth;
                    let u = px * s.dir.0 + py * s.dir.1;
                    let tex = TEXTURE_AMPLITUDE * (2.0 * std::f64::consts::PI * u / period + s.phase).sin();
                    colour = s.colour.map(|c| c + tex);
                }
            }
            let haze = HAZE * (1.0 - (-d / 60.0).exp());
            for c in 0..3 {
                let v = (1.0 - haze) * colour[c] + haze * SKY_RGB[c] + PIXEL_NOISE * rng.normal();
                rgb[c * n + i] = v.clamp(0.0, 1.0);
            }
            depth[i] = d;
            labels[i] = class;
        }
    }
    let scene = SyntheticScene {
        rgb: Tensor::new(&[3, height, width], rgb)?,
        depth: Tensor::new(&[1, height, width], depth)?,
        labels: TargetMask::new(labels, classes)?,
    };
    scene.validate()?;
    Ok(scene)
}

/// Seed of scene `index` within a dataset drawn from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

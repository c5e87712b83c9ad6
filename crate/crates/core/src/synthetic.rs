//! Procedural texture scenes with known ground truth and sparse scribbles,
//! used as the end-to-end benchmark for the synthetic backbone.
//!
//! Each class is a distinct stationary texture. Region boundaries are
//! sinusoidal so that the segmentation is not aligned with the patch grid.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::mask::{ClassTable, LabelMask, IGNORE};

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: ImagePlane,
    pub truth: LabelMask,
    pub scribbles: LabelMask,
    pub classes: ClassTable,
}

impl SyntheticScene {
    pub fn scribble_fraction(&self) -> f64 {
        self.scribbles.labeled_count() as f64 / self.scribbles.data().len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    /// 2 or 4.
    pub num_classes: usize,
    pub seed: u64,
    pub strokes_per_class: usize,
    pub stroke_length: usize,
    /// Scribbles stay at least this far from other classes.
    pub margin: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 1024,
            num_classes: 2,
            seed: 0,
            strokes_per_class: 4,
            stroke_length: 220,
            margin: 24,
        }
    }
}

impl SceneConfig {
    /// The 1024 px four-texture benchmark, with fewer strokes per class so
    /// that scribbles stay under 1% of the pixels.
    pub fn four_class() -> Self {
        Self {
            num_classes: 4,
            strokes_per_class: 2,
            ..Self::default()
        }
    }
}

/// Class of pixel `(x, y)` in the generating map.
fn region(cfg: &SceneConfig, phase: (f64, f64), x: usize, y: usize) -> u8 {
    let s = cfg.size as f64;
    let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
    let bx = 0.5 * s + 0.11 * s * (2.0 * PI * yf / (0.7 * s) + phase.0).sin();
    let right = (xf > bx) as u8;
    if cfg.num_classes == 2 {
        return right;
    }
    let by = 0.5 * s + 0.09 * s * (2.0 * PI * xf / (0.55 * s) + phase.1).sin();
    right + 2 * (yf > by) as u8
}

/// Intensity of class `class` at `(x, y)`: a per-class pattern plus uniform
/// noise.
fn texture(class: u8, x: usize, y: usize, rng: &mut ChaCha8Rng) -> f32 {
    let (xf, yf) = (x as f64, y as f64);
    let noise = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..a);
    let v = match class {
        // fine isotropic grain
        0 => 0.45 + noise(rng, 0.08),
        // horizontal bands: strong vertical gradients
        1 => 0.55 + 0.22 * (2.0 * PI * yf / 7.0).sin() + noise(rng, 0.05),
        // vertical bands
        2 => 0.50 + 0.22 * (2.0 * PI * xf / 9.0).sin() + noise(rng, 0.05),
        // smooth blotches, nearly flat at patch scale
        _ => 0.35 + 0.06 * ((xf / 23.0).sin() * (yf / 31.0).cos()) + noise(rng, 0.01),
    };
    v.clamp(0.0, 1.0) as f32
}

pub fn generate(cfg: &SceneConfig) -> Result<SyntheticScene> {
    if cfg.num_classes != 2 && cfg.num_classes != 4 {
        return Err(Error::Config(format!(
            "synthetic scenes have 2 or 4 classes, not {}",
            cfg.num_classes
        )));
    }
    if cfg.size < 64 {
        return Err(Error::Config(format!("synthetic scene size {} is below 64", cfg.size)));
    }
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mut truth = LabelMask::filled(n, n, 0);
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let c = region(cfg, phase, x, y);
            truth.set(x, y, c);
            pixels.push(texture(c, x, y, &mut rng));
        }
    }
    let image = ImagePlane::from_gray(n, n, pixels)?;
    let scribbles = draw_scribbles(cfg, &truth, &mut rng);
    Ok(SyntheticScene {
        image,
        truth,
        scribbles,
        classes: ClassTable::default_for(cfg.num_classes),
    })
}

/// True if every pixel within `margin` (Chebyshev, sampled on a ring and
/// at the centre) of `(x, y)` belongs to `class`.
fn deep_inside(truth: &LabelMask, class: u8, x: isize, y: isize, margin: isize) -> bool {
    let (w, h) = (truth.width() as isize, truth.height() as isize);
    let step = (margin / 4).max(1);
    let mut d = -margin;
    while d <= margin {
        for &(px, py) in &[(x + d, y - margin), (x + d, y + margin), (x - margin, y + d), (x + margin, y + d)] {
            if px < 0 || py < 0 || px >= w || py >= h || truth.get(px as usize, py as usize) != class {
                return false;
            }
        }
        d += step;
    }
    truth.get(x as usize, y as usize) == class
}

/// Straight 3-px-wide strokes inside each class, away from boundaries.
fn draw_scribbles(cfg: &SceneConfig, truth: &LabelMask, rng: &mut ChaCha8Rng) -> LabelMask {
    let n = cfg.size as isize;
    let margin = cfg.margin as isize;
    let mut out = LabelMask::filled(cfg.size, cfg.size, IGNORE);
    for class in 0..cfg.num_classes as u8 {
        let mut drawn = 0;
        for _ in 0..10_000 {
            if drawn == cfg.strokes_per_class {
                break;
            }
            let theta = rng.random_range(0.0..PI);
            let len = cfg.stroke_length as f64;
            let (x0, y0) = (rng.random_range(0..n as i64) as f64, rng.random_range(0..n as i64) as f64);
            let (dx, dy) = (theta.cos(), theta.sin());
            let steps = len as usize;
            let pts: Vec<(isize, isize)> = (0..=steps)
                .map(|t| {
                    let t = t as f64;
                    ((x0 + dx * t).round() as isize, (y0 + dy * t).round() as isize)
                })
                .collect();
            let ok = pts.iter().step_by(8).chain(pts.last()).all(|&(x, y)| deep_inside(truth, class, x, y, margin));
            if !ok {
                continue;
            }
            for &(x, y) in &pts {
                for oy in -1..=1 {
                    for ox in -1..=1 {
                        let (px, py) = (x + ox, y + oy);
                        if px >= 0 && py >= 0 && px < n && py < n && truth.get(px as usize, py as usize) == class {
                            out.set(px as usize, py as usize, class);
                        }
                    }
                }
            }
            drawn += 1;
        }
    }
    out
}
